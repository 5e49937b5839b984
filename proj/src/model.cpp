#include "contactsense/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <json.hpp>
#include <numeric>

#include "contactsense/error.hpp"
#include "contactsense/eval.hpp"
#include "contactsense/log.hpp"
#include "contactsense/random.hpp"
#include "contactsense/util.hpp"

namespace contactsense {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using ordered_json = nlohmann::ordered_json;

std::optional<Slot> parse_slot(std::string_view s) {
  for (int i = 0; i < kNumSlots; ++i)
    if (kSlotNames[i] == s) return static_cast<Slot>(i);
  return std::nullopt;
}

void EmbeddingBundle::set(Slot s, VectorXd v) {
  if (v.size() != slot_dim(s)) {
    throw ParameterError("slot " + std::string(to_string(s)) + " expects " + std::to_string(slot_dim(s)) +
                         " values, got " + std::to_string(v.size()));
  }
  if (!v.allFinite()) throw ParameterError("slot " + std::string(to_string(s)) + " has non-finite values");
  values[static_cast<int>(s)] = std::move(v);
  present[static_cast<int>(s)] = true;
}

// --- config ------------------------------------------------------------------

void FusionConfig::validate() const {
  std::vector<std::string> bad;
  if (d_model < 1) bad.push_back("d_model");
  if (n_heads < 1 || (d_model >= 1 && d_model % n_heads != 0)) bad.push_back("n_heads (must divide d_model)");
  if (n_layers < 0) bad.push_back("n_layers");
  if (mlp_hidden < 1) bad.push_back("mlp_hidden");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) bad.push_back("dropout_rate");
  if (n_classes != kNumClasses) bad.push_back("n_classes (must be 4)");
  if (slots.empty()) bad.push_back("slots (need at least one)");
  for (std::size_t i = 0; i < slots.size(); ++i)
    for (std::size_t j = i + 1; j < slots.size(); ++j)
      if (slots[i] == slots[j]) bad.push_back("slots (duplicate " + std::string(to_string(slots[i])) + ")");
  if (!bad.empty()) {
    std::string msg = "invalid fusion config:";
    for (const auto& b : bad) msg += " " + b;
    throw ParameterError(msg);
  }
}

std::string to_json(const FusionConfig& c) {
  ordered_json j;
  j["d_model"] = c.d_model;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["mlp_hidden"] = c.mlp_hidden;
  j["dropout_rate"] = c.dropout_rate;
  j["n_classes"] = c.n_classes;
  j["use_cls_token"] = c.use_cls_token;
  j["slots"] = ordered_json::array();
  for (auto s : c.slots) j["slots"].push_back(std::string(to_string(s)));
  return j.dump();
}

FusionConfig fusion_config_from_json(const std::string& text) {
  FusionConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
    c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
    c.n_classes = j.value("n_classes", c.n_classes);
    c.use_cls_token = j.value("use_cls_token", c.use_cls_token);
    if (j.contains("slots")) {
      c.slots.clear();
      for (const auto& s : j["slots"]) {
        const auto slot = parse_slot(s.get<std::string>());
        if (!slot) throw FormatError("unknown slot '" + s.get<std::string>() + "'");
        c.slots.push_back(*slot);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed fusion config: ") + e.what());
  }
  c.validate();
  return c;
}

void TrainConfig::validate() const {
  std::vector<std::string> bad;
  if (batch_size < 1) bad.push_back("batch_size");
  if (max_epochs < 1) bad.push_back("max_epochs");
  if (!(learning_rate >= 0.0)) bad.push_back("learning_rate");
  if (!(weight_decay >= 0.0)) bad.push_back("weight_decay");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) bad.push_back("beta1");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) bad.push_back("beta2");
  if (!(adam_eps > 0.0)) bad.push_back("adam_eps");
  if (early_stop_patience < 1) bad.push_back("early_stop_patience");
  if (!bad.empty()) {
    std::string msg = "invalid train config:";
    for (const auto& b : bad) msg += " " + b;
    throw ParameterError(msg);
  }
}

// --- building blocks ----------------------------------------------------------

namespace {

constexpr double kLayerNormEps = 1e-5;

struct NormCache {
  MatrixXd xhat;
  VectorXd inv_std;
};

MatrixXd layer_norm(const MatrixXd& x, const MatrixXd& gain, const MatrixXd& bias, NormCache* cache) {
  const auto d = static_cast<double>(x.cols());
  NormCache c;
  c.xhat.resize(x.rows(), x.cols());
  c.inv_std.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).sum() / d;
    const auto centered = (x.row(r).array() - mu).matrix();
    const double var = centered.squaredNorm() / d;
    c.inv_std(r) = 1.0 / std::sqrt(var + kLayerNormEps);
    c.xhat.row(r) = centered * c.inv_std(r);
  }
  MatrixXd y = (c.xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
  if (cache != nullptr) *cache = std::move(c);
  return y;
}

MatrixXd layer_norm_backward(const MatrixXd& dy, const NormCache& c, const MatrixXd& gain, MatrixXd& dgain,
                             MatrixXd& dbias) {
  dgain += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  dbias += dy.colwise().sum();
  const MatrixXd dxhat = dy.array().rowwise() * gain.row(0).array();
  MatrixXd dx(dy.rows(), dy.cols());
  const auto d = static_cast<double>(dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double mean_d = dxhat.row(r).sum() / d;
    const double mean_dx = dxhat.row(r).dot(c.xhat.row(r)) / d;
    dx.row(r) = c.inv_std(r) * (dxhat.row(r).array() - mean_d - c.xhat.row(r).array() * mean_dx).matrix();
  }
  return dx;
}

double gelu(double u) { return 0.5 * u * (1.0 + std::erf(u * M_SQRT1_2)); }
double gelu_grad(double u) {
  constexpr double kInvSqrt2Pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(u * M_SQRT1_2)) + u * kInvSqrt2Pi * std::exp(-0.5 * u * u);
}

MatrixXd affine(const MatrixXd& x, const MatrixXd& w, const MatrixXd& b) {
  MatrixXd y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

enum DropSite : std::uint64_t { kTokens = 1, kAttention = 2, kFeedForward = 3, kHead = 4 };

MatrixXd dropout_mask(const DropoutKey& key, DropSite site, std::uint64_t layer, Eigen::Index rows, Eigen::Index cols,
                      double rate) {
  MatrixXd m(rows, cols);
  const double keep = 1.0 / (1.0 - rate);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) {
      const double u = keyed_uniform({key.seed, key.epoch, key.step, site, layer, static_cast<std::uint64_t>(r),
                                      static_cast<std::uint64_t>(c)});
      m(r, c) = u < rate ? 0.0 : keep;
    }
  return m;
}

void softmax_rows(MatrixXd& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double mx = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - mx).exp().matrix();
    s.row(r) /= s.row(r).sum();
  }
}

}  // namespace

LossResult cross_entropy(const MatrixXd& logits, const std::vector<int>& labels) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) throw ParameterError("logits/labels size mismatch");
  if (labels.empty()) throw ParameterError("empty batch");
  LossResult out;
  out.grad.resize(logits.rows(), logits.cols());
  const auto n = static_cast<double>(labels.size());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= logits.cols()) throw ParameterError("label " + std::to_string(y) + " out of range");
    const double mx = logits.row(i).maxCoeff();
    const auto shifted = (logits.row(i).array() - mx).eval();
    const double lse = std::log(shifted.exp().sum());
    out.loss += (lse - shifted(y)) / n;
    out.grad.row(i) = (shifted - lse).exp().matrix() / n;
    out.grad(i, y) -= 1.0 / n;
  }
  return out;
}

// --- model -----------------------------------------------------------------------

struct FusionModel::Cache {
  struct Layer {
    MatrixXd x_in, h1, q, k, v, o, attn_mask, x2, h2, u, g, ff_mask;
    NormCache ln1, ln2;
    std::vector<MatrixXd> attn;  // per (sample, head), T x T
  };
  Mode mode = Mode::eval;
  int batch = 0;
  std::vector<MatrixXd> slot_inputs;  // per configured slot, batch x dim
  MatrixXd token_mask;
  std::vector<Layer> layers;
  NormCache final_ln;
  MatrixXd pooled_norm, head_u, head_g, head_mask;
};

FusionModel::FusionModel(FusionConfig config, std::uint64_t seed)
    : config_(std::move(config)), cache_(std::make_unique<Cache>()) {
  config_.validate();
  Rng rng(seed);
  const int d = config_.d_model;
  const int hid = config_.mlp_hidden;
  auto add_weight = [&](const std::string& name, int rows, int cols) {
    const double a = std::sqrt(6.0 / (rows + cols));
    MatrixXd w(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c)
      for (Eigen::Index r = 0; r < rows; ++r) w(r, c) = rng.uniform(-a, a);
    params_.push_back(Parameter{name, w, MatrixXd::Zero(rows, cols), true});
  };
  auto add_const = [&](const std::string& name, int cols, double v) {
    params_.push_back(Parameter{name, MatrixXd::Constant(1, cols, v), MatrixXd::Zero(1, cols), false});
  };

  for (auto s : config_.slots) {
    const std::string p = "proj." + std::string(to_string(s));
    add_weight(p + ".w", slot_dim(s), d);
    add_const(p + ".b", d, 0.0);
  }
  if (config_.use_cls_token) {
    MatrixXd cls(1, d);
    for (Eigen::Index c = 0; c < d; ++c) cls(0, c) = rng.normal();
    params_.push_back(Parameter{"cls", cls, MatrixXd::Zero(1, d), false});
  }
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    add_const(p + "ln1.g", d, 1.0);
    add_const(p + "ln1.b", d, 0.0);
    for (const char* m : {"q", "k", "v", "o"}) {
      add_weight(p + "attn.w" + m, d, d);
      add_const(p + "attn.b" + m, d, 0.0);
    }
    add_const(p + "ln2.g", d, 1.0);
    add_const(p + "ln2.b", d, 0.0);
    add_weight(p + "mlp.w1", d, hid);
    add_const(p + "mlp.b1", hid, 0.0);
    add_weight(p + "mlp.w2", hid, d);
    add_const(p + "mlp.b2", d, 0.0);
  }
  add_const("final_ln.g", d, 1.0);
  add_const("final_ln.b", d, 0.0);
  add_weight("head.w1", d, hid);
  add_const("head.b1", hid, 0.0);
  add_weight("head.w2", hid, config_.n_classes);
  add_const("head.b2", config_.n_classes, 0.0);

  for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i].name] = i;
  round_to_float();
}

FusionModel::FusionModel(const FusionModel& other)
    : config_(other.config_),
      params_(other.params_),
      index_(other.index_),
      scale_mean_(other.scale_mean_),
      scale_inv_std_(other.scale_inv_std_),
      cache_(std::make_unique<Cache>()) {}
FusionModel::FusionModel(FusionModel&&) noexcept = default;
FusionModel& FusionModel::operator=(const FusionModel& other) {
  if (this != &other) {
    config_ = other.config_;
    params_ = other.params_;
    index_ = other.index_;
    scale_mean_ = other.scale_mean_;
    scale_inv_std_ = other.scale_inv_std_;
    cache_ = std::make_unique<Cache>();
  }
  return *this;
}
FusionModel& FusionModel::operator=(FusionModel&&) noexcept = default;
FusionModel::~FusionModel() = default;

std::size_t FusionModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

Parameter& FusionModel::parameter(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw NotFoundError("no parameter named " + name);
  return params_[it->second];
}

void FusionModel::round_to_float() {
  for (auto& p : params_) p.value = p.value.cast<float>().cast<double>();
}

void FusionModel::zero_grad() {
  for (auto& p : params_) p.grad.setZero();
}

MatrixXd FusionModel::run(const std::vector<EmbeddingBundle>& batch, Mode mode, const DropoutKey& key,
                          Cache* cache) const {
  if (batch.empty()) throw ParameterError("empty batch");
  const auto& P = [&](const std::string& name) -> const MatrixXd& { return params_[index_.at(name)].value; };
  const int B = static_cast<int>(batch.size());
  const int T = config_.n_tokens();
  const int d = config_.d_model;
  const int N = B * T;
  const int off = config_.use_cls_token ? 1 : 0;
  const int H = config_.n_heads;
  const int dh = d / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool drop = mode == Mode::train && config_.dropout_rate > 0.0;
  if (cache != nullptr) {
    cache->mode = mode;
    cache->batch = B;
    cache->slot_inputs.clear();
    cache->layers.assign(static_cast<std::size_t>(config_.n_layers), {});
  }

  MatrixXd x(N, d);
  for (std::size_t si = 0; si < config_.slots.size(); ++si) {
    const Slot s = config_.slots[si];
    const int dim = slot_dim(s);
    MatrixXd e(B, dim);
    for (int b = 0; b < B; ++b) {
      const auto& bundle = batch[static_cast<std::size_t>(b)];
      if (!bundle.has(s)) throw ParameterError("sample " + std::to_string(b) + " is missing slot " + std::string(to_string(s)));
      if (bundle.get(s).size() != dim) {
        throw ParameterError("slot " + std::string(to_string(s)) + " expects " + std::to_string(dim) + " values, got " +
                             std::to_string(bundle.get(s).size()));
      }
      e.row(b) = bundle.get(s).transpose();
    }
    if (input_scaling_fitted()) {
      e.rowwise() -= scale_mean_[si].transpose();
      e = e * scale_inv_std_[si].asDiagonal();
    }
    const std::string p = "proj." + std::string(to_string(s));
    const MatrixXd tok = affine(e, P(p + ".w"), P(p + ".b"));
    for (int b = 0; b < B; ++b) x.row(b * T + off + static_cast<int>(si)) = tok.row(b);
    if (cache != nullptr) cache->slot_inputs.push_back(std::move(e));
  }
  if (config_.use_cls_token)
    for (int b = 0; b < B; ++b) x.row(b * T) = P("cls").row(0);
  if (drop) {
    const MatrixXd m = dropout_mask(key, kTokens, 0, N, d, config_.dropout_rate);
    x.array() *= m.array();
    if (cache != nullptr) cache->token_mask = m;
  }

  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    Cache::Layer* lc = cache != nullptr ? &cache->layers[static_cast<std::size_t>(l)] : nullptr;
    NormCache n1;
    const MatrixXd h1 = layer_norm(x, P(p + "ln1.g"), P(p + "ln1.b"), &n1);
    const MatrixXd q = affine(h1, P(p + "attn.wq"), P(p + "attn.bq"));
    const MatrixXd k = affine(h1, P(p + "attn.wk"), P(p + "attn.bk"));
    const MatrixXd v = affine(h1, P(p + "attn.wv"), P(p + "attn.bv"));
    MatrixXd o(N, d);
    std::vector<MatrixXd> attn;
    if (lc != nullptr) attn.reserve(static_cast<std::size_t>(B * H));
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < H; ++h) {
        MatrixXd s = q.block(b * T, h * dh, T, dh) * k.block(b * T, h * dh, T, dh).transpose() * scale;
        softmax_rows(s);
        o.block(b * T, h * dh, T, dh) = s * v.block(b * T, h * dh, T, dh);
        if (lc != nullptr) attn.push_back(std::move(s));
      }
    MatrixXd z = affine(o, P(p + "attn.wo"), P(p + "attn.bo"));
    MatrixXd attn_mask;
    if (drop) {
      attn_mask = dropout_mask(key, kAttention, static_cast<std::uint64_t>(l), N, d, config_.dropout_rate);
      z.array() *= attn_mask.array();
    }
    const MatrixXd x2 = x + z;
    NormCache n2;
    const MatrixXd h2 = layer_norm(x2, P(p + "ln2.g"), P(p + "ln2.b"), &n2);
    const MatrixXd u = affine(h2, P(p + "mlp.w1"), P(p + "mlp.b1"));
    const MatrixXd g = u.unaryExpr([](double t) { return gelu(t); });
    MatrixXd f = affine(g, P(p + "mlp.w2"), P(p + "mlp.b2"));
    MatrixXd ff_mask;
    if (drop) {
      ff_mask = dropout_mask(key, kFeedForward, static_cast<std::uint64_t>(l), N, d, config_.dropout_rate);
      f.array() *= ff_mask.array();
    }
    if (lc != nullptr) {
      lc->x_in = x;
      lc->h1 = h1;
      lc->q = q;
      lc->k = k;
      lc->v = v;
      lc->o = o;
      lc->attn = std::move(attn);
      lc->attn_mask = std::move(attn_mask);
      lc->x2 = x2;
      lc->h2 = h2;
      lc->u = u;
      lc->g = g;
      lc->ff_mask = std::move(ff_mask);
      lc->ln1 = std::move(n1);
      lc->ln2 = std::move(n2);
    }
    x = x2 + f;
  }

  MatrixXd pooled(B, d);
  for (int b = 0; b < B; ++b) {
    if (config_.use_cls_token) {
      pooled.row(b) = x.row(b * T);
    } else {
      pooled.row(b) = x.middleRows(b * T, T).colwise().mean();
    }
  }
  NormCache nf;
  const MatrixXd pn = layer_norm(pooled, P("final_ln.g"), P("final_ln.b"), &nf);
  const MatrixXd hu = affine(pn, P("head.w1"), P("head.b1"));
  MatrixXd hg = hu.unaryExpr([](double t) { return gelu(t); });
  MatrixXd head_mask;
  if (drop) {
    head_mask = dropout_mask(key, kHead, 0, B, config_.mlp_hidden, config_.dropout_rate);
    hg.array() *= head_mask.array();
  }
  MatrixXd logits = affine(hg, P("head.w2"), P("head.b2"));
  if (cache != nullptr) {
    cache->final_ln = std::move(nf);
    cache->pooled_norm = pn;
    cache->head_u = hu;
    cache->head_g = std::move(hg);
    cache->head_mask = std::move(head_mask);
  }
  return logits;
}

MatrixXd FusionModel::forward(const std::vector<EmbeddingBundle>& batch, Mode mode, const DropoutKey& key) {
  return run(batch, mode, key, cache_.get());
}

void FusionModel::backward(const MatrixXd& grad_logits) {
  const Cache& c = *cache_;
  if (c.batch == 0) throw StateError("backward called before forward");
  if (grad_logits.rows() != c.batch || grad_logits.cols() != config_.n_classes) {
    throw ParameterError("gradient shape does not match the last forward batch");
  }
  zero_grad();
  auto W = [&](const std::string& name) -> const MatrixXd& { return params_[index_.at(name)].value; };
  auto G = [&](const std::string& name) -> MatrixXd& { return params_[index_.at(name)].grad; };
  const int B = c.batch;
  const int T = config_.n_tokens();
  const int d = config_.d_model;
  const int N = B * T;
  const int off = config_.use_cls_token ? 1 : 0;
  const int H = config_.n_heads;
  const int dh = d / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool drop = c.mode == Mode::train && config_.dropout_rate > 0.0;

  G("head.w2") += c.head_g.transpose() * grad_logits;
  G("head.b2") += grad_logits.colwise().sum();
  MatrixXd dhg = grad_logits * W("head.w2").transpose();
  if (drop) dhg.array() *= c.head_mask.array();
  const MatrixXd dhu = dhg.array() * c.head_u.unaryExpr([](double t) { return gelu_grad(t); }).array();
  G("head.w1") += c.pooled_norm.transpose() * dhu;
  G("head.b1") += dhu.colwise().sum();
  const MatrixXd dpn = dhu * W("head.w1").transpose();
  const MatrixXd dpooled = layer_norm_backward(dpn, c.final_ln, W("final_ln.g"), G("final_ln.g"), G("final_ln.b"));

  MatrixXd dx = MatrixXd::Zero(N, d);
  for (int b = 0; b < B; ++b) {
    if (config_.use_cls_token) {
      dx.row(b * T) = dpooled.row(b);
    } else {
      for (int t = 0; t < T; ++t) dx.row(b * T + t) = dpooled.row(b) / static_cast<double>(T);
    }
  }

  for (int l = config_.n_layers - 1; l >= 0; --l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const auto& lc = c.layers[static_cast<std::size_t>(l)];
    // feed-forward branch
    MatrixXd df = dx;
    if (drop) df.array() *= lc.ff_mask.array();
    G(p + "mlp.w2") += lc.g.transpose() * df;
    G(p + "mlp.b2") += df.colwise().sum();
    const MatrixXd dg = df * W(p + "mlp.w2").transpose();
    const MatrixXd du = dg.array() * lc.u.unaryExpr([](double t) { return gelu_grad(t); }).array();
    G(p + "mlp.w1") += lc.h2.transpose() * du;
    G(p + "mlp.b1") += du.colwise().sum();
    const MatrixXd dh2 = du * W(p + "mlp.w1").transpose();
    MatrixXd dx2 = dx + layer_norm_backward(dh2, lc.ln2, W(p + "ln2.g"), G(p + "ln2.g"), G(p + "ln2.b"));

    // attention branch
    MatrixXd dz = dx2;
    if (drop) dz.array() *= lc.attn_mask.array();
    G(p + "attn.wo") += lc.o.transpose() * dz;
    G(p + "attn.bo") += dz.colwise().sum();
    const MatrixXd dout = dz * W(p + "attn.wo").transpose();
    MatrixXd dq(N, d), dk(N, d), dv(N, d);
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < H; ++h) {
        const MatrixXd& a = lc.attn[static_cast<std::size_t>(b * H + h)];
        const auto doh = dout.block(b * T, h * dh, T, dh);
        dv.block(b * T, h * dh, T, dh) = a.transpose() * doh;
        const MatrixXd da = doh * lc.v.block(b * T, h * dh, T, dh).transpose();
        const VectorXd row_dot = (da.array() * a.array()).rowwise().sum();
        const MatrixXd ds = (a.array() * (da.colwise() - row_dot).array()).matrix() * scale;
        dq.block(b * T, h * dh, T, dh) = ds * lc.k.block(b * T, h * dh, T, dh);
        dk.block(b * T, h * dh, T, dh) = ds.transpose() * lc.q.block(b * T, h * dh, T, dh);
      }
    G(p + "attn.wq") += lc.h1.transpose() * dq;
    G(p + "attn.bq") += dq.colwise().sum();
    G(p + "attn.wk") += lc.h1.transpose() * dk;
    G(p + "attn.bk") += dk.colwise().sum();
    G(p + "attn.wv") += lc.h1.transpose() * dv;
    G(p + "attn.bv") += dv.colwise().sum();
    const MatrixXd dh1 =
        dq * W(p + "attn.wq").transpose() + dk * W(p + "attn.wk").transpose() + dv * W(p + "attn.wv").transpose();
    dx = dx2 + layer_norm_backward(dh1, lc.ln1, W(p + "ln1.g"), G(p + "ln1.g"), G(p + "ln1.b"));
  }

  if (drop) dx.array() *= c.token_mask.array();
  if (config_.use_cls_token)
    for (int b = 0; b < B; ++b) G("cls") += dx.row(b * T);
  for (std::size_t si = 0; si < config_.slots.size(); ++si) {
    MatrixXd dtok(B, d);
    for (int b = 0; b < B; ++b) dtok.row(b) = dx.row(b * T + off + static_cast<int>(si));
    const std::string p = "proj." + std::string(to_string(config_.slots[si]));
    G(p + ".w") += c.slot_inputs[si].transpose() * dtok;
    G(p + ".b") += dtok.colwise().sum();
  }
}

double FusionModel::loss_and_gradients(const std::vector<EmbeddingBundle>& batch, const std::vector<int>& labels,
                                       Mode mode, const DropoutKey& key) {
  const MatrixXd logits = forward(batch, mode, key);
  const auto lr = cross_entropy(logits, labels);
  backward(lr.grad);
  return lr.loss;
}

std::vector<Prediction> FusionModel::predict(const std::vector<EmbeddingBundle>& batch) const {
  const MatrixXd logits = run(batch, Mode::eval, {}, nullptr);
  std::vector<Prediction> out(batch.size());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    auto& p = out[static_cast<std::size_t>(i)];
    const double mx = logits.row(i).maxCoeff();
    double sum = 0.0;
    for (int k = 0; k < kNumClasses; ++k) {
      p.logits[static_cast<std::size_t>(k)] = logits(i, k);
      p.probabilities[static_cast<std::size_t>(k)] = std::exp(logits(i, k) - mx);
      sum += p.probabilities[static_cast<std::size_t>(k)];
    }
    int best = 0;
    for (int k = 0; k < kNumClasses; ++k) {
      p.probabilities[static_cast<std::size_t>(k)] /= sum;
      if (logits(i, k) > logits(i, best)) best = k;
    }
    p.label = label_from_index(best);
  }
  return out;
}

Prediction FusionModel::predict(const EmbeddingBundle& bundle) const { return predict(std::vector{bundle}).front(); }

// --- checkpoint -------------------------------------------------------------------

namespace {
constexpr char kCheckpointMagic[8] = {'C', 'S', 'C', 'K', 'P', 'T', '1', '\n'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw FormatError("truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}
void put_f32(std::string& out, double v) {
  const float f = static_cast<float>(v);
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}
double get_f32(const std::string& in, std::size_t& pos) {
  const std::uint32_t bits = get_u32(in, pos);
  float f;
  std::memcpy(&f, &bits, 4);
  return static_cast<double>(f);
}
}  // namespace

void FusionModel::save(const std::filesystem::path& path) const {
  ordered_json header;
  header["format"] = "contactsense-fusion";
  header["config"] = ordered_json::parse(to_json(config_));
  header["params"] = ordered_json::array();
  for (const auto& p : params_) header["params"].push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
  header["input_scaling"] = input_scaling_fitted();
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  put_u32(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  for (const auto& p : params_)
    for (Eigen::Index r = 0; r < p.value.rows(); ++r)
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) put_f32(out, p.value(r, c));
  for (std::size_t si = 0; si < scale_mean_.size(); ++si) {
    for (double v : scale_mean_[si]) put_f32(out, v);
    for (double v : scale_inv_std_[si]) put_f32(out, v);
  }
  atomic_write(path, out);
}

FusionModel FusionModel::load(const std::filesystem::path& path, const std::optional<FusionConfig>& expected) {
  const std::string in = read_file(path);
  if (in.size() < sizeof kCheckpointMagic || std::memcmp(in.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw FormatError(path.string() + ": not a fusion checkpoint");
  }
  std::size_t pos = sizeof kCheckpointMagic;
  const std::uint32_t hlen = get_u32(in, pos);
  if (pos + hlen > in.size()) throw FormatError(path.string() + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.substr(pos, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad header: " + e.what());
  }
  pos += hlen;
  const FusionConfig cfg = fusion_config_from_json(header.at("config").dump());
  if (expected && !(*expected == cfg)) {
    throw ConflictError("checkpoint config " + to_json(cfg) + " does not match expected " + to_json(*expected));
  }
  FusionModel m(cfg, 0);
  const auto& listed = header.at("params");
  if (listed.size() != m.params_.size()) throw FormatError(path.string() + ": parameter list does not match config");
  for (std::size_t i = 0; i < m.params_.size(); ++i) {
    auto& p = m.params_[i];
    if (listed[i].at("name").get<std::string>() != p.name || listed[i].at("rows").get<Eigen::Index>() != p.value.rows() ||
        listed[i].at("cols").get<Eigen::Index>() != p.value.cols()) {
      throw FormatError(path.string() + ": parameter block " + std::to_string(i) + " does not match " + p.name);
    }
    for (Eigen::Index r = 0; r < p.value.rows(); ++r)
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) p.value(r, c) = get_f32(in, pos);
  }
  if (header.value("input_scaling", false)) {
    for (const auto s : cfg.slots) {
      Eigen::VectorXd mean(slot_dim(s)), inv(slot_dim(s));
      for (auto& v : mean) v = get_f32(in, pos);
      for (auto& v : inv) v = get_f32(in, pos);
      m.scale_mean_.push_back(std::move(mean));
      m.scale_inv_std_.push_back(std::move(inv));
    }
  }
  if (pos != in.size()) throw FormatError(path.string() + ": trailing bytes after parameters");
  return m;
}

void FusionModel::fit_input_scaling(const std::vector<EmbeddingBundle>& samples) {
  if (samples.empty()) throw ParameterError("input scaling needs at least one sample");
  std::vector<Eigen::VectorXd> mean, inv_std;
  for (const auto s : config_.slots) {
    const Eigen::Index dim = slot_dim(s);
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(dim);
    for (const auto& b : samples) {
      if (!b.has(s)) throw ParameterError("input scaling: sample is missing slot " + std::string(to_string(s)));
      sum += b.get(s);
    }
    const Eigen::VectorXd mu = sum / static_cast<double>(samples.size());
    Eigen::VectorXd var = Eigen::VectorXd::Zero(dim);
    for (const auto& b : samples) var += (b.get(s) - mu).cwiseAbs2();
    var /= static_cast<double>(samples.size());
    // constant dimensions (e.g. an always-missing image) pass through centred
    const Eigen::VectorXd inv = var.unaryExpr([](double v) { return v > 1e-12 ? 1.0 / std::sqrt(v) : 1.0; });
    // stored as f32, so round now to keep saved and in-memory models identical
    mean.push_back(mu.cast<float>().cast<double>());
    inv_std.push_back(inv.cast<float>().cast<double>());
  }
  scale_mean_ = std::move(mean);
  scale_inv_std_ = std::move(inv_std);
}

// --- optimiser and training ----------------------------------------------------------

AdamW::AdamW(const TrainConfig& tc, const std::vector<Parameter>& params) : tc_(tc) {
  tc_.validate();
  for (const auto& p : params) {
    m_.push_back(MatrixXd::Zero(p.value.rows(), p.value.cols()));
    v_.push_back(MatrixXd::Zero(p.value.rows(), p.value.cols()));
  }
}

void AdamW::step(std::vector<Parameter>& params) {
  ++t_;
  const double bc1 = 1.0 - std::pow(tc_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(tc_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    m_[i] = tc_.beta1 * m_[i] + (1.0 - tc_.beta1) * p.grad;
    v_[i] = tc_.beta2 * v_[i] + (1.0 - tc_.beta2) * p.grad.cwiseAbs2();
    const MatrixXd update = (m_[i] / bc1).array() / ((v_[i] / bc2).array().sqrt() + tc_.adam_eps);
    if (p.decay) p.value -= tc_.learning_rate * tc_.weight_decay * p.value;
    p.value -= tc_.learning_rate * update;
  }
}

namespace {

struct Evaluation {
  double loss = 0.0;
  double macro_f1 = 0.0;
};

Evaluation evaluate(const FusionModel& model, const std::vector<LabeledBundle>& set) {
  constexpr std::size_t kChunk = 64;
  Evaluation ev;
  std::vector<int> preds, labels;
  for (std::size_t i = 0; i < set.size(); i += kChunk) {
    std::vector<EmbeddingBundle> batch;
    std::vector<int> y;
    for (std::size_t j = i; j < std::min(set.size(), i + kChunk); ++j) {
      batch.push_back(set[j].bundle);
      y.push_back(set[j].label);
    }
    const auto pr = model.predict(batch);
    MatrixXd logits(static_cast<Eigen::Index>(pr.size()), kNumClasses);
    for (std::size_t j = 0; j < pr.size(); ++j) {
      for (int k = 0; k < kNumClasses; ++k) logits(static_cast<Eigen::Index>(j), k) = pr[j].logits[static_cast<std::size_t>(k)];
      preds.push_back(index_of(pr[j].label));
    }
    ev.loss += cross_entropy(logits, y).loss * static_cast<double>(y.size());
    labels.insert(labels.end(), y.begin(), y.end());
  }
  ev.loss /= static_cast<double>(set.size());
  ev.macro_f1 = metrics(confusion(preds, labels)).macro_f1;
  return ev;
}

}  // namespace

TrainResult train(const std::vector<LabeledBundle>& train_set, const std::vector<LabeledBundle>& val_set,
                  const FusionConfig& fc, const TrainConfig& tc) {
  tc.validate();
  if (train_set.empty()) throw StateError("train split is empty");
  if (val_set.empty()) throw StateError("val split is empty");
  FusionModel model(fc, tc.seed);
  {
    std::vector<EmbeddingBundle> inputs;
    inputs.reserve(train_set.size());
    for (const auto& s : train_set) inputs.push_back(s.bundle);
    model.fit_input_scaling(inputs);
  }
  AdamW opt(tc, model.parameters());
  TrainResult result{model, {}, 0};
  double best_f1 = -1.0;
  double best_loss = 0.0;
  int since_best = 0;

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::uint64_t step = 0;
  for (int epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    Rng rng(splitmix64(tc.seed ^ (0xE90C0000ULL + static_cast<std::uint64_t>(epoch))));
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(tc.batch_size)) {
      std::vector<EmbeddingBundle> batch;
      std::vector<int> labels;
      for (std::size_t j = i; j < std::min(order.size(), i + static_cast<std::size_t>(tc.batch_size)); ++j) {
        batch.push_back(train_set[order[j]].bundle);
        labels.push_back(train_set[order[j]].label);
      }
      const double loss =
          model.loss_and_gradients(batch, labels, Mode::train, {tc.seed, static_cast<std::uint64_t>(epoch), step++});
      loss_sum += loss * static_cast<double>(labels.size());
      opt.step(model.parameters());
      model.round_to_float();
    }
    for (const auto& p : model.parameters()) {
      if (!p.value.allFinite()) throw StateError("parameter " + p.name + " became non-finite at epoch " + std::to_string(epoch));
    }
    const auto ev = evaluate(model, val_set);
    result.history.push_back(EpochMetrics{epoch, loss_sum / static_cast<double>(train_set.size()), ev.macro_f1, ev.loss});
    log_info("epoch " + std::to_string(epoch) + " train_loss " + std::to_string(result.history.back().train_loss) +
             " val_f1 " + std::to_string(ev.macro_f1) + " val_loss " + std::to_string(ev.loss));
    if (ev.macro_f1 > best_f1 || (ev.macro_f1 == best_f1 && ev.loss < best_loss)) {
      best_f1 = ev.macro_f1;
      best_loss = ev.loss;
      result.model = model;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= tc.early_stop_patience) {
      break;
    }
  }
  return result;
}

std::string metrics_csv(const std::vector<EpochMetrics>& history) {
  std::string out = "epoch,train_loss,val_f1,val_loss\n";
  char buf[128];
  for (const auto& e : history) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g\n", e.epoch, e.train_loss, e.val_f1, e.val_loss);
    out += buf;
  }
  return out;
}

// --- embedding store ------------------------------------------------------------------

void EmbeddingStore::put(const std::string& id, const VectorXd& v) {
  if (v.size() != slot_dim(slot_)) {
    throw ParameterError("slot " + std::string(to_string(slot_)) + " expects " + std::to_string(slot_dim(slot_)) +
                         " values, got " + std::to_string(v.size()));
  }
  auto [it, inserted] = values_.insert_or_assign(id, v.cast<float>().cast<double>());
  if (inserted) order_.push_back(id);
}

const VectorXd* EmbeddingStore::find(const std::string& id) const {
  const auto it = values_.find(id);
  return it == values_.end() ? nullptr : &it->second;
}

void EmbeddingStore::save(const std::filesystem::path& path) const {
  std::string out;
  for (const auto& id : order_) {
    put_u32(out, static_cast<std::uint32_t>(id.size()));
    out += id;
    out.push_back(static_cast<char>(slot_));
    const auto& v = values_.at(id);
    put_u32(out, static_cast<std::uint32_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) put_f32(out, v(i));
  }
  atomic_write(path, out);
}

EmbeddingStore EmbeddingStore::load(const std::filesystem::path& path) {
  const std::string in = read_file(path);
  std::optional<Slot> slot = parse_slot(path.stem().string());
  std::size_t pos = 0;
  std::vector<std::pair<std::string, VectorXd>> records;
  try {
    while (pos < in.size()) {
      const std::uint32_t n = get_u32(in, pos);
      if (pos + n + 1 > in.size()) throw FormatError("truncated record");
      std::string id = in.substr(pos, n);
      pos += n;
      const auto tag = static_cast<std::uint8_t>(in[pos++]);
      if (tag >= kNumSlots) throw FormatError("bad slot tag " + std::to_string(tag));
      if (slot && static_cast<std::uint8_t>(*slot) != tag) throw FormatError("mixed slot tags");
      slot = static_cast<Slot>(tag);
      const std::uint32_t dim = get_u32(in, pos);
      if (static_cast<int>(dim) != slot_dim(*slot)) throw FormatError("record " + id + " has dimension " + std::to_string(dim));
      VectorXd v(dim);
      for (std::uint32_t i = 0; i < dim; ++i) v(i) = get_f32(in, pos);
      records.emplace_back(std::move(id), std::move(v));
    }
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (!slot) throw FormatError(path.string() + ": cannot tell which slot an empty store belongs to");
  EmbeddingStore store(*slot);
  for (auto& [id, v] : records) store.put(id, v);
  return store;
}

std::filesystem::path embedding_store_path(const std::filesystem::path& dir, Slot s) {
  return dir / (std::string(to_string(s)) + ".emb");
}

// --- builtin encoders -----------------------------------------------------------------

namespace {
constexpr int kPatch = 16;
constexpr int kBands = MelConfig::kMels / kPatch;
constexpr std::uint64_t kEncoderSeed = 0x5EED0E5C0DE5ULL;

MatrixXd gaussian(Rng& rng, int rows, int cols) {
  MatrixXd m(rows, cols);
  const double s = 1.0 / std::sqrt(static_cast<double>(rows));
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = s * rng.normal();
  return m;
}

double normalized_db(double v) { return (v - MelConfig::kDbFloor) / -MelConfig::kDbFloor; }
}  // namespace

BuiltinEncoders::BuiltinEncoders(std::uint64_t seed) {
  Rng rng(seed);
  for (int b = 0; b < kBands; ++b) audio_w_.push_back(gaussian(rng, kPatch * kPatch, 768));
  audio_b_ = 0.1 * gaussian(rng, 768, 1).col(0) * std::sqrt(768.0);
  semantic_w_ = gaussian(rng, 2 * MelConfig::kMels, 512);
  semantic_b_ = 0.1 * gaussian(rng, 512, 1).col(0) * std::sqrt(512.0);
  image_w_ = gaussian(rng, 3 * kPatch * kPatch, 768);
  image_b_ = 0.1 * gaussian(rng, 768, 1).col(0) * std::sqrt(768.0);
}

const BuiltinEncoders& BuiltinEncoders::instance() {
  static const BuiltinEncoders enc(kEncoderSeed);
  return enc;
}

VectorXd BuiltinEncoders::encode_audio(const MelSpectrogram& mel) const {
  const int real = mel.real_frames();
  const int n_time = (real + kPatch - 1) / kPatch;
  if (n_time == 0) return audio_b_;
  VectorXd sum = VectorXd::Zero(768);
  MatrixXd patches(n_time, kPatch * kPatch);
  for (int band = 0; band < kBands; ++band) {
    for (int j = 0; j < n_time; ++j)
      for (int i = 0; i < kPatch; ++i)
        for (int t = 0; t < kPatch; ++t) {
          const int frame = j * kPatch + t;
          patches(j, i * kPatch + t) = frame < real ? normalized_db(mel.values(band * kPatch + i, frame)) : 0.0;
        }
    sum += (patches * audio_w_[static_cast<std::size_t>(band)]).colwise().sum().transpose();
  }
  return sum / static_cast<double>(kBands * n_time) + audio_b_;
}

VectorXd BuiltinEncoders::encode_semantic(const MelSpectrogram& mel) const {
  const int real = mel.real_frames();
  VectorXd stats = VectorXd::Zero(2 * MelConfig::kMels);
  if (real > 0) {
    for (int m = 0; m < MelConfig::kMels; ++m) {
      const auto row = mel.values.row(m).head(real).unaryExpr([](double v) { return normalized_db(v); }).eval();
      const double mean = row.mean();
      stats(m) = mean;
      stats(MelConfig::kMels + m) = std::sqrt((row.array() - mean).square().mean());
    }
  }
  return semantic_w_.transpose() * stats + semantic_b_;
}

VectorXd BuiltinEncoders::encode_image(const Tensor& image) const {
  if (image.dims != std::vector<int>{3, 224, 224}) throw ParameterError("image tensor must be [3,224,224]");
  constexpr int kGrid = 224 / kPatch;
  MatrixXd patches(kGrid * kGrid, 3 * kPatch * kPatch);
  for (int py = 0; py < kGrid; ++py)
    for (int px = 0; px < kGrid; ++px)
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < kPatch; ++y)
          for (int x = 0; x < kPatch; ++x)
            patches(py * kGrid + px, (c * kPatch + y) * kPatch + x) =
                image.data[static_cast<std::size_t>((c * 224 + py * kPatch + y) * 224 + px * kPatch + x)];
  return (patches * image_w_).colwise().mean().transpose() + image_b_;
}

EmbeddingBundle BuiltinEncoders::encode(const MelSpectrogram& mel, const Tensor* image) const {
  EmbeddingBundle b;
  b.set(Slot::audio_spectral, encode_audio(mel));
  b.set(Slot::audio_semantic, encode_semantic(mel));
  if (image != nullptr) b.set(Slot::image, encode_image(*image));
  return b;
}

}  // namespace contactsense
