#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "contactsense/model.hpp"

namespace fixtures {

// Random bundle with every slot filled with N(0, 1) values.
contactsense::EmbeddingBundle random_bundle(std::uint64_t seed, double scale = 1.0);

// Four well separated Gaussian clusters, one per class, in every slot.
std::vector<contactsense::LabeledBundle> gaussian_clusters(std::size_t per_class, std::uint64_t seed,
                                                           double spread = 1.0);

}  // namespace fixtures
