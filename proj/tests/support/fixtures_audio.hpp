#pragma once

#include <cstdint>
#include <vector>

namespace fixtures {

// sin at `hz` plus white noise of standard deviation `noise`.
std::vector<double> tone_in_noise(double hz, double amp, double noise, int rate, std::size_t n, std::uint64_t seed);
std::vector<double> white_noise(double sigma, std::size_t n, std::uint64_t seed);

}  // namespace fixtures
