#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace gradcheck {

using namespace contactsense;

FusionConfig tiny_config() {
  FusionConfig c;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.mlp_hidden = 16;
  return c;
}

Report check(FusionModel& model, const std::vector<EmbeddingBundle>& batch, const std::vector<int>& labels, Mode mode,
             const DropoutKey& key, const Tolerance& tol) {
  model.loss_and_gradients(batch, labels, mode, key);
  std::vector<Eigen::MatrixXd> analytic;
  for (const auto& p : model.parameters()) analytic.push_back(p.grad);

  Report out;
  double worst_rel = -1.0;
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    auto& p = model.parameters()[i];
    Eigen::MatrixXd numeric(p.value.rows(), p.value.cols());
    for (Eigen::Index k = 0; k < p.value.size(); ++k) {
      const double orig = p.value(k);
      p.value(k) = orig + tol.eps;
      const double up = cross_entropy(model.forward(batch, mode, key), labels).loss;
      p.value(k) = orig - tol.eps;
      const double down = cross_entropy(model.forward(batch, mode, key), labels).loss;
      p.value(k) = orig;
      numeric(k) = (up - down) / (2.0 * tol.eps);
    }
    TensorResult r;
    r.name = p.name;
    r.size = static_cast<std::size_t>(p.value.size());
    const double scale = std::max(analytic[i].norm(), numeric.norm());
    const double diff = (analytic[i] - numeric).norm();
    const double root_n = std::sqrt(static_cast<double>(r.size));
    if (scale <= tol.atol * root_n) {
      // gradient vanishes identically (e.g. key biases under softmax shift
      // invariance): compare absolutely
      r.rel_l2 = diff / (tol.atol * root_n);
      r.pass = r.rel_l2 < tol.rtol;
    } else {
      r.rel_l2 = diff / scale;
      const double rms = scale / root_n;
      for (Eigen::Index k = 0; k < p.value.size(); ++k) {
        const double a = analytic[i](k), n = numeric(k);
        const double bound = tol.rtol * (std::max(std::abs(a), std::abs(n)) + rms);
        r.worst_excess = std::max(r.worst_excess, std::abs(a - n) / bound);
      }
      r.pass = r.rel_l2 < tol.rtol && r.worst_excess <= 1.0;
    }
    out.pass = out.pass && r.pass;
    out.elements += r.size;
    if (r.rel_l2 > worst_rel) {
      worst_rel = r.rel_l2;
      out.worst = r.name + " rel_l2=" + std::to_string(r.rel_l2);
    }
    out.tensors.push_back(std::move(r));
  }
  return out;
}

}  // namespace gradcheck
