#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "contactsense/features.hpp"
#include "contactsense/labels.hpp"
#include "contactsense/tensor_io.hpp"

namespace contactsense {

// Embedding slots in token order.
enum class Slot : std::uint8_t { audio_spectral = 0, audio_semantic = 1, image = 2 };
inline constexpr int kNumSlots = 3;
inline constexpr std::array<int, kNumSlots> kSlotDims = {768, 512, 768};
inline constexpr std::array<std::string_view, kNumSlots> kSlotNames = {"audio_spectral", "audio_semantic", "image"};

inline int slot_dim(Slot s) { return kSlotDims[static_cast<int>(s)]; }
inline std::string_view to_string(Slot s) { return kSlotNames[static_cast<int>(s)]; }
std::optional<Slot> parse_slot(std::string_view s);

struct EmbeddingBundle {
  std::array<Eigen::VectorXd, kNumSlots> values;
  std::array<bool, kNumSlots> present{};

  void set(Slot s, Eigen::VectorXd v);
  const Eigen::VectorXd& get(Slot s) const { return values[static_cast<int>(s)]; }
  bool has(Slot s) const { return present[static_cast<int>(s)]; }
};

struct FusionConfig {
  int d_model = 128;
  int n_layers = 2;
  int n_heads = 4;
  int mlp_hidden = 256;
  double dropout_rate = 0.1;
  int n_classes = kNumClasses;
  bool use_cls_token = true;
  std::vector<Slot> slots = {Slot::audio_spectral, Slot::audio_semantic, Slot::image};

  void validate() const;
  int n_tokens() const { return static_cast<int>(slots.size()) + (use_cls_token ? 1 : 0); }
  friend bool operator==(const FusionConfig&, const FusionConfig&) = default;
};

std::string to_json(const FusionConfig& c);
FusionConfig fusion_config_from_json(const std::string& text);

struct TrainConfig {
  int batch_size = 4;
  int max_epochs = 50;
  double learning_rate = 3e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  int early_stop_patience = 10;

  void validate() const;
};

// Counter-based dropout key; each (seed, epoch, step) draws fresh masks.
struct DropoutKey {
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;
  std::uint64_t step = 0;
};

enum class Mode { train, eval };

struct Parameter {
  std::string name;
  Eigen::MatrixXd value;
  Eigen::MatrixXd grad;
  bool decay = false;  // weight decay applies to weight matrices only
};

struct Prediction {
  Label label = Label::ambient;
  std::array<double, kNumClasses> probabilities{};
  std::array<double, kNumClasses> logits{};
};

struct LossResult {
  double loss = 0.0;
  Eigen::MatrixXd grad;  // d loss / d logits
};

// Mean cross-entropy over the batch via log-sum-exp.
LossResult cross_entropy(const Eigen::MatrixXd& logits, const std::vector<int>& labels);

class FusionModel {
 public:
  FusionModel(FusionConfig config, std::uint64_t seed);
  FusionModel(const FusionModel& other);
  FusionModel(FusionModel&&) noexcept;
  FusionModel& operator=(const FusionModel& other);
  FusionModel& operator=(FusionModel&&) noexcept;
  ~FusionModel();

  const FusionConfig& config() const { return config_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  Parameter& parameter(const std::string& name);

  // Logits (batch x n_classes). Dropout is active only in train mode.
  Eigen::MatrixXd forward(const std::vector<EmbeddingBundle>& batch, Mode mode, const DropoutKey& key = {});
  // Accumulates parameter gradients (overwriting previous ones) for the
  // most recent forward call, given d loss / d logits.
  void backward(const Eigen::MatrixXd& grad_logits);
  void zero_grad();

  // Forward + loss + backward in one call; returns the loss.
  double loss_and_gradients(const std::vector<EmbeddingBundle>& batch, const std::vector<int>& labels, Mode mode,
                            const DropoutKey& key = {});

  Prediction predict(const EmbeddingBundle& bundle) const;
  std::vector<Prediction> predict(const std::vector<EmbeddingBundle>& batch) const;

  // Rounds every parameter to 32-bit precision.
  void round_to_float();

  // Per-slot input standardisation (mean / std per dimension) fitted on
  // training embeddings. Identity until fitted; saved with the checkpoint.
  void fit_input_scaling(const std::vector<EmbeddingBundle>& samples);
  bool input_scaling_fitted() const { return !scale_mean_.empty(); }

  void save(const std::filesystem::path& path) const;
  static FusionModel load(const std::filesystem::path& path, const std::optional<FusionConfig>& expected = {});

 private:
  struct Cache;
  Eigen::MatrixXd run(const std::vector<EmbeddingBundle>& batch, Mode mode, const DropoutKey& key, Cache* cache) const;

  FusionConfig config_;
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
  std::vector<Eigen::VectorXd> scale_mean_, scale_inv_std_;  // by slot position
  std::unique_ptr<Cache> cache_;  // activations of the last forward
};

class AdamW {
 public:
  AdamW(const TrainConfig& tc, const std::vector<Parameter>& params);
  void step(std::vector<Parameter>& params);
  std::uint64_t steps() const { return t_; }

 private:
  TrainConfig tc_;
  std::vector<Eigen::MatrixXd> m_, v_;
  std::uint64_t t_ = 0;
};

struct LabeledBundle {
  std::string id;
  EmbeddingBundle bundle;
  int label = 0;
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double val_f1 = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  FusionModel model;  // best-validation parameters
  std::vector<EpochMetrics> history;
  int best_epoch = 0;
};

TrainResult train(const std::vector<LabeledBundle>& train_set, const std::vector<LabeledBundle>& val_set,
                  const FusionConfig& fc, const TrainConfig& tc);

std::string metrics_csv(const std::vector<EpochMetrics>& history);

// --- embedding store -------------------------------------------------------

// One file per slot; each record is (u32 id length, id bytes, u8 slot tag,
// u32 dim, dim little-endian f32 values).
class EmbeddingStore {
 public:
  explicit EmbeddingStore(Slot slot) : slot_(slot) {}
  Slot slot() const { return slot_; }
  void put(const std::string& id, const Eigen::VectorXd& v);
  const Eigen::VectorXd* find(const std::string& id) const;
  const std::vector<std::string>& ids() const { return order_; }
  std::size_t size() const { return order_.size(); }

  void save(const std::filesystem::path& path) const;
  static EmbeddingStore load(const std::filesystem::path& path);

 private:
  Slot slot_;
  std::vector<std::string> order_;
  std::map<std::string, Eigen::VectorXd> values_;
};

std::filesystem::path embedding_store_path(const std::filesystem::path& dir, Slot s);

// --- builtin encoders --------------------------------------------------------

// Small frozen patch encoders with fixed random weights. They stand in for
// large pretrained encoders so the pipeline runs self-contained.
class BuiltinEncoders {
 public:
  static const BuiltinEncoders& instance();

  // 16x16 patches over the non-padded mel region, a separate projection per
  // 16-bin frequency band, mean pooled.
  Eigen::VectorXd encode_audio(const MelSpectrogram& mel) const;
  // Per-bin mean and standard deviation over real frames, projected to 512.
  Eigen::VectorXd encode_semantic(const MelSpectrogram& mel) const;
  // Image tensor [3,224,224]: 16x16x3 patches, shared projection, mean pooled.
  Eigen::VectorXd encode_image(const Tensor& image) const;

  const Eigen::MatrixXd& image_weights() const { return image_w_; }
  const Eigen::VectorXd& audio_bias() const { return audio_b_; }
  const Eigen::VectorXd& image_bias() const { return image_b_; }

  EmbeddingBundle encode(const MelSpectrogram& mel, const Tensor* image) const;

 private:
  explicit BuiltinEncoders(std::uint64_t seed);
  std::vector<Eigen::MatrixXd> audio_w_;  // per band: 256 x 768
  Eigen::VectorXd audio_b_;
  Eigen::MatrixXd semantic_w_;            // 256 x 512
  Eigen::VectorXd semantic_b_;
  Eigen::MatrixXd image_w_;               // 768 x 768
  Eigen::VectorXd image_b_;
};

}  // namespace contactsense
