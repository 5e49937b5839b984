#pragma once

#include <cstdint>
#include <vector>

#include "contactsense/audio.hpp"
#include "contactsense/random.hpp"
#include "contactsense/segmentation.hpp"

namespace oracle {

using contactsense::BinaryMask;
using contactsense::ContactSegment;
using contactsense::Envelope;
using contactsense::SegmentationParams;

// Quadratic reference for run extraction, gap merging and duration
// filtering. Runs are found by scanning every start candidate forward,
// chains are grown pair by pair, and only maximal chains are emitted.
std::vector<ContactSegment> reference_segments(const BinaryMask& mask, double hop, const SegmentationParams& p,
                                               double offset = 0.0);

// Percentile by explicit selection (no sorting of the whole input).
double reference_percentile(const std::vector<double>& values, double p);

// Noise floor with a random number of rectangular and ramped bursts.
Envelope random_envelope(contactsense::Rng& rng, std::size_t n, double hop);

SegmentationParams random_params(contactsense::Rng& rng, double hop);

// Frames covered by contact segments (exact, unlike summed seconds).
long coverage_frames(const std::vector<ContactSegment>& segs, double hop, double offset = 0.0);

// Relative L2 distance ||a - b|| / ||b||.
double rel_l2(const std::vector<double>& a, const std::vector<double>& b);

// Energy of x in [lo_hz, hi_hz] from a direct DFT restricted to that band.
double band_energy(const std::vector<double>& x, int sample_rate, double lo_hz, double hi_hz);

// Slaney mel filter centres from the closed form (fmin 0).
std::vector<double> slaney_centres(int n, double fmax);

}  // namespace oracle
