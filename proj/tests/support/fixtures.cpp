#include "fixtures.hpp"

#include "contactsense/random.hpp"

namespace fixtures {

using namespace contactsense;

EmbeddingBundle random_bundle(std::uint64_t seed, double scale) {
  Rng rng(seed);
  EmbeddingBundle b;
  for (int s = 0; s < kNumSlots; ++s) {
    Eigen::VectorXd v(kSlotDims[s]);
    for (auto& x : v) x = scale * rng.normal();
    b.set(static_cast<Slot>(s), v);
  }
  return b;
}

std::vector<LabeledBundle> gaussian_clusters(std::size_t per_class, std::uint64_t seed, double spread) {
  Rng centres(0xC1A55ULL);
  std::array<std::array<Eigen::VectorXd, kNumSlots>, kNumClasses> mu;
  for (int c = 0; c < kNumClasses; ++c)
    for (int s = 0; s < kNumSlots; ++s) {
      mu[c][s].resize(kSlotDims[s]);
      for (auto& x : mu[c][s]) x = 3.0 * centres.normal();
    }
  Rng rng(seed);
  std::vector<LabeledBundle> out;
  for (std::size_t i = 0; i < per_class; ++i)
    for (int c = 0; c < kNumClasses; ++c) {
      LabeledBundle lb;
      lb.id = "c" + std::to_string(c) + "_" + std::to_string(i);
      lb.label = c;
      for (int s = 0; s < kNumSlots; ++s) {
        Eigen::VectorXd v = mu[c][s];
        for (auto& x : v) x += spread * rng.normal();
        lb.bundle.set(static_cast<Slot>(s), v);
      }
      out.push_back(std::move(lb));
    }
  return out;
}

}  // namespace fixtures
