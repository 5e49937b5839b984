#include <doctest.h>

#include <cmath>
#include <fstream>

#include "contactsense/error.hpp"
#include "contactsense/model.hpp"
#include "contactsense/util.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "synth.hpp"

using namespace contactsense;

namespace {

FusionConfig small_config() {
  FusionConfig c;
  c.d_model = 32;
  c.n_layers = 1;
  c.n_heads = 4;
  c.mlp_hidden = 64;
  return c;
}

}  // namespace

TEST_CASE("backward matches central differences for every parameter") {
  FusionModel model(gradcheck::tiny_config(), 11);
  const std::vector<EmbeddingBundle> batch = {fixtures::random_bundle(1), fixtures::random_bundle(2),
                                              fixtures::random_bundle(3)};
  const std::vector<int> labels = {1, 3, 0};
  for (auto mode : {Mode::train, Mode::eval}) {
    const auto r = gradcheck::check(model, batch, labels, mode, {5, 1, 2});
    for (const auto& t : r.tensors) {
      INFO(t.name << " rel_l2=" << t.rel_l2 << " excess=" << t.worst_excess);
      CHECK(t.pass);
    }
    CHECK(r.elements == model.parameter_count());
  }
}

TEST_CASE("gradient check also holds without the CLS token and with fewer slots") {
  auto cfg = gradcheck::tiny_config();
  cfg.use_cls_token = false;
  cfg.slots = {Slot::image, Slot::audio_spectral};
  FusionModel model(cfg, 3);
  const auto r = gradcheck::check(model, {fixtures::random_bundle(5), fixtures::random_bundle(6)}, {2, 2}, Mode::train,
                                  {1, 2, 3});
  CHECK_MESSAGE(r.pass, r.worst);
}

TEST_CASE("cross-entropy of uniform logits is ln 4") {
  const auto r = cross_entropy(Eigen::MatrixXd::Constant(3, 4, 0.7), {0, 1, 3});
  CHECK(std::abs(r.loss - std::log(4.0)) < 1e-12);
  // d/dz of mean CE: (softmax - onehot) / batch
  CHECK(r.grad(0, 0) == doctest::Approx((0.25 - 1.0) / 3.0));
  CHECK(r.grad(0, 1) == doctest::Approx(0.25 / 3.0));
  // large logits stay finite
  Eigen::MatrixXd big(1, 4);
  big << 1000.0, 0.0, -1000.0, 0.0;
  CHECK(cross_entropy(big, {0}).loss == doctest::Approx(0.0));
  CHECK(cross_entropy(big, {2}).loss == doctest::Approx(2000.0));
  CHECK_THROWS_AS(cross_entropy(big, {4}), ParameterError);
}

TEST_CASE("dropout follows its key and vanishes in eval mode") {
  FusionModel model(gradcheck::tiny_config(), 2);
  const std::vector<EmbeddingBundle> batch = {fixtures::random_bundle(1)};
  const auto a = model.forward(batch, Mode::train, {1, 1, 1});
  CHECK(model.forward(batch, Mode::train, {1, 1, 1}) == a);
  CHECK(model.forward(batch, Mode::train, {1, 1, 2}) != a);
  const auto e = model.forward(batch, Mode::eval, {1, 1, 1});
  CHECK(model.forward(batch, Mode::eval, {9, 9, 9}) == e);
  const auto p = model.predict(batch[0]);
  double sum = 0.0;
  for (double q : p.probabilities) sum += q;
  CHECK(sum == doctest::Approx(1.0));
  CHECK(p.logits[0] == doctest::Approx(e(0, 0)));
}

TEST_CASE("forward rejects malformed bundles") {
  FusionModel model(gradcheck::tiny_config(), 2);
  EmbeddingBundle b = fixtures::random_bundle(1);
  b.present[static_cast<int>(Slot::image)] = false;
  CHECK_THROWS_AS(model.forward({b}, Mode::eval), ParameterError);
  CHECK_THROWS_AS(model.forward({}, Mode::eval), ParameterError);
  CHECK_THROWS_AS(b.set(Slot::image, Eigen::VectorXd::Zero(5)), ParameterError);
  Eigen::VectorXd nan = Eigen::VectorXd::Zero(768);
  nan(3) = std::nan("");
  CHECK_THROWS_AS(b.set(Slot::image, nan), ParameterError);
  FusionModel fresh(gradcheck::tiny_config(), 2);
  CHECK_THROWS_AS(fresh.backward(Eigen::MatrixXd::Zero(1, 4)), StateError);
}

TEST_CASE("one AdamW step matches the update rule") {
  TrainConfig tc;
  tc.learning_rate = 0.1;
  tc.weight_decay = 0.5;
  std::vector<Parameter> ps(2);
  ps[0] = {"w", Eigen::MatrixXd::Constant(1, 2, 2.0), Eigen::MatrixXd(1, 2), true};
  ps[0].grad << 0.5, -4.0;
  ps[1] = {"b", Eigen::MatrixXd::Constant(1, 1, 2.0), Eigen::MatrixXd::Constant(1, 1, 0.5), false};
  AdamW opt(tc, ps);
  opt.step(ps);
  // first step: m_hat = g, v_hat = g^2, so the Adam term is g / (|g| + eps)
  const double decayed = 2.0 - 0.1 * 0.5 * 2.0;
  CHECK(ps[0].value(0, 0) == doctest::Approx(decayed - 0.1 * 0.5 / (0.5 + 1e-8)));
  CHECK(ps[0].value(0, 1) == doctest::Approx(decayed + 0.1 * 4.0 / (4.0 + 1e-8)));
  CHECK(ps[1].value(0, 0) == doctest::Approx(2.0 - 0.1 * 0.5 / (0.5 + 1e-8)));
  CHECK(opt.steps() == 1);
}

TEST_CASE("training separates clusters and replays bit for bit") {
  auto data = fixtures::gaussian_clusters(40, 7);
  std::vector<LabeledBundle> tr(data.begin(), data.begin() + 120), va(data.begin() + 120, data.end());
  TrainConfig tc;
  tc.max_epochs = 6;
  tc.seed = 5;
  const auto a = train(tr, va, small_config(), tc);
  const auto b = train(tr, va, small_config(), tc);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].train_loss == b.history[i].train_loss);
    CHECK(a.history[i].val_loss == b.history[i].val_loss);
  }
  CHECK(metrics_csv(a.history) == metrics_csv(b.history));
  const auto& best = a.history[static_cast<std::size_t>(a.best_epoch - 1)];
  CHECK(best.val_f1 >= 0.9);
  CHECK(a.history.back().train_loss < a.history.front().train_loss);
  CHECK_THROWS_AS(train({}, va, small_config(), tc), StateError);
}

TEST_CASE("checkpoints round-trip exactly and refuse damage") {
  synth::TempDir dir("ckpt");
  FusionModel model(small_config(), 4);
  model.save(dir / "m.ckpt");
  const auto back = FusionModel::load(dir / "m.ckpt");
  CHECK(back.config() == model.config());
  for (std::size_t i = 0; i < model.parameters().size(); ++i) CHECK(back.parameters()[i].value == model.parameters()[i].value);
  back.save(dir / "again.ckpt");
  CHECK(read_file(dir / "again.ckpt") == read_file(dir / "m.ckpt"));

  auto other = small_config();
  other.d_model = 16;
  other.n_heads = 2;
  CHECK_THROWS_AS(FusionModel::load(dir / "m.ckpt", other), ConflictError);
  auto bytes = read_file(dir / "m.ckpt");
  std::ofstream(dir / "trunc.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 7);
  CHECK_THROWS_AS(FusionModel::load(dir / "trunc.ckpt"), FormatError);
  std::ofstream(dir / "extra.ckpt", std::ios::binary) << bytes << "xx";
  CHECK_THROWS_AS(FusionModel::load(dir / "extra.ckpt"), FormatError);
  std::ofstream(dir / "junk.ckpt", std::ios::binary) << "hello";
  CHECK_THROWS_AS(FusionModel::load(dir / "junk.ckpt"), FormatError);
}

TEST_CASE("fusion config JSON round-trips and validation lists every problem") {
  auto c = small_config();
  c.slots = {Slot::audio_semantic};
  c.use_cls_token = false;
  CHECK(fusion_config_from_json(to_json(c)) == c);
  c.d_model = 30;  // not divisible by 4 heads
  c.dropout_rate = 1.5;
  try {
    c.validate();
    FAIL("expected ParameterError");
  } catch (const ParameterError& e) {
    CHECK(std::string(e.what()).find("dropout_rate") != std::string::npos);
    CHECK(std::string(e.what()).find("d_model") != std::string::npos);
  }
  CHECK_THROWS_AS(fusion_config_from_json(R"({"slots": ["smell"]})"), FormatError);
}

TEST_CASE("embedding stores round-trip at float precision") {
  synth::TempDir dir("emb");
  EmbeddingStore s(Slot::audio_semantic);
  Eigen::VectorXd v = Eigen::VectorXd::LinSpaced(512, -1.0, 1.0);
  s.put("a", v);
  s.put("b~aug1", 2.0 * v);
  s.save(dir / "s.emb");
  const auto back = EmbeddingStore::load(dir / "s.emb");
  CHECK(back.slot() == Slot::audio_semantic);
  CHECK(back.ids() == s.ids());
  CHECK(*back.find("a") == v.cast<float>().cast<double>());
  CHECK(back.find("zzz") == nullptr);
  back.save(dir / "t.emb");
  CHECK(read_file(dir / "t.emb") == read_file(dir / "s.emb"));
  CHECK_THROWS_AS(s.put("c", Eigen::VectorXd::Zero(3)), ParameterError);
  auto bytes = read_file(dir / "s.emb");
  std::ofstream(dir / "bad.emb", std::ios::binary) << bytes.substr(0, bytes.size() - 1);
  CHECK_THROWS_AS(EmbeddingStore::load(dir / "bad.emb"), FormatError);
}

TEST_CASE("builtin encoders are deterministic and sized per slot") {
  const auto& enc = BuiltinEncoders::instance();
  MelSpectrogram mel;
  mel.values = Eigen::MatrixXd::Constant(128, 1024, -100.0);
  mel.values.leftCols(80).setConstant(-20.0);
  mel.pad_frames = 1024 - 80;
  const auto a = enc.encode_audio(mel);
  CHECK(a.size() == 768);
  CHECK(enc.encode_semantic(mel).size() == 512);
  CHECK(enc.encode_audio(mel) == a);
  Tensor img{{3, 224, 224}, std::vector<float>(3 * 224 * 224, 0.5f)};
  CHECK(enc.encode_image(img).size() == 768);
  const auto b = enc.encode(mel, nullptr);
  CHECK(b.has(Slot::audio_spectral));
  CHECK(!b.has(Slot::image));
  CHECK(enc.encode(mel, &img).has(Slot::image));
  CHECK_THROWS_AS(enc.encode_image(Tensor{{3, 10, 10}, std::vector<float>(300)}), ParameterError);
}

TEST_CASE("fitted input scaling survives the checkpoint and undoes per-dimension affine maps") {
  std::vector<EmbeddingBundle> xs;
  for (int i = 0; i < 6; ++i) xs.push_back(fixtures::random_bundle(static_cast<std::uint64_t>(20 + i)));
  FusionModel model(small_config(), 4);
  CHECK(!model.input_scaling_fitted());
  model.fit_input_scaling(xs);
  CHECK(model.input_scaling_fitted());

  synth::TempDir dir("scale");
  model.save(dir / "s.ckpt");
  const auto back = FusionModel::load(dir / "s.ckpt");
  CHECK(back.input_scaling_fitted());
  for (const auto& x : xs) CHECK(back.predict(x).probabilities == model.predict(x).probabilities);
  back.save(dir / "again.ckpt");
  CHECK(read_file(dir / "again.ckpt") == read_file(dir / "s.ckpt"));

  // the same model fitted on y = a x + c sees y exactly as it saw x
  auto affine = [](EmbeddingBundle b) {
    for (auto s : {Slot::audio_spectral, Slot::audio_semantic, Slot::image}) {
      const Eigen::VectorXd v = b.get(s);
      const Eigen::ArrayXd a = Eigen::ArrayXd::LinSpaced(v.size(), 0.5, 8.0);
      b.set(s, (a * v.array() + 3.0).matrix().eval());
    }
    return b;
  };
  std::vector<EmbeddingBundle> ys;
  for (const auto& x : xs) ys.push_back(affine(x));
  FusionModel other(small_config(), 4);
  other.fit_input_scaling(ys);
  const auto px = model.forward(xs, Mode::eval);
  const auto py = other.forward(ys, Mode::eval);
  CHECK((px - py).cwiseAbs().maxCoeff() < 1e-3);
  CHECK_THROWS_AS(model.fit_input_scaling({}), ParameterError);
}
