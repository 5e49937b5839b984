#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "contactsense/audio.hpp"
#include "contactsense/labels.hpp"

namespace contactsense {

struct SegmentationParams {
  double alpha_offset = 0.3;
  double beta_factor = 0.75;
  double delta_min_seconds = 1.0;
  double gamma_squeeze_seconds = 0.5;
  double noise_percentile = 10.0;
  double signal_percentile = 90.0;
  double min_ambient_seconds = 1.0;

  // Throws ParameterError naming every offending field.
  void validate() const;
};

struct Thresholds {
  double t_contact = 0.0;
  double t_noncontact = 0.0;
  double f_noise = 0.0;
  double f_signal = 0.0;
};

enum class SegmentKind { contact, ambient };
enum class ReviewState { automatic, accepted, rejected, edited };

std::string_view to_string(SegmentKind k);
std::string_view to_string(ReviewState s);
std::optional<SegmentKind> parse_segment_kind(std::string_view s);
std::optional<ReviewState> parse_review_state(std::string_view s);

struct ContactSegment {
  double start_seconds = 0.0;
  double end_seconds = 0.0;
  SegmentKind kind = SegmentKind::contact;
  std::optional<Label> label;
  ReviewState review_state = ReviewState::automatic;

  double duration() const { return end_seconds - start_seconds; }
  friend bool operator==(const ContactSegment&, const ContactSegment&) = default;
};

using BinaryMask = std::vector<std::uint8_t>;

// Linear interpolation between closest ranks (rank = p/100 * (n-1)).
double percentile(std::vector<double> values, double p);

Thresholds compute_thresholds(const Envelope& e, const SegmentationParams& p);

// mask[k] = 1 iff e.values[k] > t_contact.
BinaryMask classify_samples(const Envelope& e, const Thresholds& t);

// Runs of 1s, merged across gaps <= gamma, then filtered by delta_min.
// Frame k spans [offset + k*hop, offset + (k+1)*hop).
std::vector<ContactSegment> extract_segments(const BinaryMask& mask, double hop_seconds,
                                             const SegmentationParams& p, double start_offset_seconds = 0.0);

std::vector<ContactSegment> mine_ambient(const Envelope& e, const Thresholds& t,
                                         const std::vector<ContactSegment>& contact, double min_ambient_seconds);

struct SegmentationResult {
  Envelope envelope;
  Thresholds thresholds;
  std::vector<ContactSegment> contact;
  std::vector<ContactSegment> ambient;

  // Contact and ambient merged and sorted by start.
  std::vector<ContactSegment> all_segments() const;
};

SegmentationResult segment_trial(const Waveform& w, const SegmentationParams& p,
                                 const EnvelopeParams& ep = {});

// Segment file document shared by the CLI, the review service and the
// dataset builder.
struct SegmentFile {
  std::string trial_id;
  SegmentationParams params;
  EnvelopeParams envelope_params;
  Thresholds thresholds;
  std::vector<ContactSegment> segments;
};

std::string to_json(const SegmentFile& f);
SegmentFile segment_file_from_json(const std::string& text);

// Checks sortedness, disjointness and the contact duration rule.
// Returns an empty string when the list is valid, else a description.
std::string check_segment_invariants(const std::vector<ContactSegment>& segs, const SegmentationParams& p);

}  // namespace contactsense
