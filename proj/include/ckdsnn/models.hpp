#pragma once

#include "ckdsnn/data.hpp"
#include "ckdsnn/ops.hpp"
#include "ckdsnn/rng.hpp"
#include "ckdsnn/spiking.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ckdsnn {

inline constexpr int kStages = 4;

/// Four 3x3 conv-BN stages, global average pool, linear head.
struct Architecture {
  Index in_channels = 1;
  Index num_classes = 4;
  std::array<Index, kStages> channels{16, 32, 64, 64};
  std::array<Index, kStages> strides{1, 2, 2, 2};

  static Architecture tiny(Index in_channels, Index num_classes) {
    return {in_channels, num_classes, {16, 32, 64, 64}, {1, 2, 2, 2}};
  }
  static Architecture reference(Index in_channels, Index num_classes) {
    return {in_channels, num_classes, {32, 64, 128, 256}, {1, 2, 2, 2}};
  }

  /// Spatial size after stage `stage` (1-based) for an h x w input.
  std::pair<Index, Index> stage_hw(int stage, Index h, Index w) const;
  void validate() const;
  bool operator==(const Architecture&) const = default;
};

/// Per-sample, per-time-step multiply-accumulate counts of the parameterised layers.
struct LayerMacs {
  std::string name;
  double macs = 0;
};
std::vector<LayerMacs> layer_macs(const Architecture& arch, Index height, Index width);

struct ConvBnStage {
  TensorF kernel;  // [out, in, 3, 3]
  TensorF bn_weight;
  TensorF bn_bias;
  Vector<float> running_mean;
  Vector<float> running_var;
  Index stride = 1;

  TensorF forward(const TensorF& x, bool training);
};

using NamedTensor = std::pair<std::string, TensorF*>;

/// Parameters and buffers shared by the teacher and its spiking twin.
class ConvStack {
 public:
  ConvStack(const Architecture& arch, Rng& rng);

  const Architecture& architecture() const { return arch_; }
  const Normalizer& normalizer() const { return normalizer_; }
  void set_normalizer(Normalizer n) { normalizer_ = std::move(n); }

  void train(bool on = true) { training_ = on; }
  void eval() { training_ = false; }
  bool training() const { return training_; }

  std::vector<NamedTensor> parameters();
  std::vector<std::pair<std::string, const TensorF*>> parameters() const;
  void set_requires_grad(bool flag);
  void zero_grad();

  /// Parameters, BN buffers and normaliser as named float tensors.
  std::map<std::string, TensorF> state() const;
  void load_state(const std::map<std::string, TensorF>& tensors);

 protected:
  template <typename Self>
  static auto collect_parameters(Self& self);

  TensorF head(const TensorF& pooled_features);
  TensorF normalized(const TensorF& images) const;

  Architecture arch_;
  std::array<ConvBnStage, kStages> stages_;
  TensorF head_weight_;  // [classes, C4]
  TensorF head_bias_;    // [classes]
  Normalizer normalizer_;
  bool training_ = true;
};

class TeacherNet : public ConvStack {
 public:
  struct Output {
    TensorF logits;                            // [N, K]
    std::array<TensorF, kStages> stage_features;  // post-ReLU, [N, C_s, h_s, w_s]
    const TensorF& features() const { return stage_features[kStages - 1]; }
  };

  TeacherNet(const Architecture& arch, Rng& rng) : ConvStack(arch, rng) {}

  Output forward(const TensorF& images);
  /// Runs stages after `stage` (1-based) and the head from that stage's features.
  TensorF forward_from(int stage, const TensorF& features);
};

class StudentNet : public ConvStack {
 public:
  struct Output {
    TensorF logits;                                  // [N, K]
    std::array<SpikeTrain<float>, kStages> stage_spikes;  // each [T, N, C_s, h_s, w_s]
    const SpikeTrain<float>& spikes() const { return stage_spikes[kStages - 1]; }
  };

  StudentNet(const Architecture& arch, const NeuronParams& neuron, Rng& rng);

  const NeuronParams& neuron() const { return neuron_; }
  NeuronParams& neuron() { return neuron_; }

  /// Static encoding: the image drives the first stage at every step. Logits
  /// come from the linear head on the time-mean of the final-stage spikes.
  Output forward(const TensorF& images, Index time_steps);
  /// Readout from final-stage spikes[T, N, C, h, w].
  TensorF head_from_spikes(const TensorF& spikes);

 private:
  NeuronParams neuron_;
};

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, bad_version, corrupt, shape_mismatch, missing_tensor, wrong_model };

  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Named float tensors. On disk: "CKDS", u32 version, u32 count, then per
/// tensor u32 name length, name, u8 dtype (0 = f32), u8 rank, rank x u32 dims,
/// little-endian payload. Tensors are written in name order.
struct Checkpoint {
  std::map<std::string, TensorF> tensors;
};

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

enum class ModelKind { teacher, student };
ModelKind checkpoint_kind(const Checkpoint& checkpoint);

Checkpoint to_checkpoint(const TeacherNet& net);
Checkpoint to_checkpoint(const StudentNet& net);
TeacherNet teacher_from_checkpoint(const Checkpoint& checkpoint);
StudentNet student_from_checkpoint(const Checkpoint& checkpoint);

inline void save_checkpoint(const TeacherNet& net, const std::filesystem::path& path) {
  save_checkpoint(to_checkpoint(net), path);
}
inline void save_checkpoint(const StudentNet& net, const std::filesystem::path& path) {
  save_checkpoint(to_checkpoint(net), path);
}
inline TeacherNet load_teacher(const std::filesystem::path& path) { return teacher_from_checkpoint(load_checkpoint(path)); }
inline StudentNet load_student(const std::filesystem::path& path) { return student_from_checkpoint(load_checkpoint(path)); }

}  // namespace ckdsnn
