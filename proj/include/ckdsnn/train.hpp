#pragma once

#include "ckdsnn/data.hpp"
#include "ckdsnn/distill.hpp"
#include "ckdsnn/energy.hpp"
#include "ckdsnn/models.hpp"
#include "ckdsnn/saliency.hpp"

#include <json.hpp>

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace ckdsnn {

enum class Schedule { cosine, constant };
/// Scalar whose feature gradient weights the teacher CAM.
enum class CamTarget { class_logit, log_prob };
/// Spike map fed to the saliency scaling: raw counts, or counts / (T * C).
enum class SamReduce { sum, mean };

std::string to_string(Schedule s);
std::string to_string(CamTarget t);
Schedule parse_schedule(std::string_view text);
CamTarget parse_cam_target(std::string_view text);
std::string to_string(SamReduce r);
SamReduce parse_sam_reduce(std::string_view text);

struct StepLoss {
  double ce = 0, samd = 0, nld = 0, total = 0;
};

struct EpochMetrics {
  int epoch = 0;
  double ce = 0, samd = 0, nld = 0, total = 0;
  double test_acc = 0;
  double fire_rate = 0;  // percent over all student stages; 0 for the teacher
  double seconds = 0;
};

struct TrainConfig {
  int epochs = 20;
  Index batch_size = 64;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  Schedule schedule = Schedule::cosine;
  std::uint64_t seed = 1;
  Index time_steps = 4;

  LossWeights weights;  // beta, gamma, tau, temp_map
  NoiseConfig noise;    // mode and lambda
  ScaleKind scale = ScaleKind::softmax;
  int samd_stage = 4;
  CamTarget cam_target = CamTarget::class_logit;
  SamReduce sam_reduce = SamReduce::mean;

  std::array<Index, kStages> channels{16, 32, 64, 64};  // Architecture::tiny
  std::array<Index, kStages> strides{1, 2, 2, 2};
  NeuronParams neuron;

  DataRequest data;
  bool augment = false;
  AugmentConfig augment_config;
  bool deterministic = false;
  int eval_every = 1;  // test-set evaluation cadence in epochs; the last epoch is always evaluated
  std::filesystem::path out_dir;  // empty: no files written
  std::function<void(const EpochMetrics&)> on_epoch;  // progress hook, not part of the run identity

  void validate() const;
  Architecture architecture(Index in_channels, Index num_classes) const;
  SaliencyScaleMode scale_mode() const { return {scale, weights.temp_map}; }
  nlohmann::json to_json() const;
};

struct RunMetrics {
  std::vector<EpochMetrics> epochs;
  std::vector<StepLoss> steps;
};

inline constexpr const char* kMetricsHeader = "epoch,ce,samd,nld,total,test_acc,fire_rate,seconds";
void write_metrics_csv(const RunMetrics& metrics, std::ostream& out);
void write_metrics_csv(const RunMetrics& metrics, const std::filesystem::path& path);

class DivergenceError : public NonFiniteError {
 public:
  using NonFiniteError::NonFiniteError;
};

struct RunResult {
  Checkpoint best;
  Checkpoint last;
  RunMetrics metrics;
  double best_accuracy = 0;
  double final_accuracy = 0;
  double final_fire_rate = 0;
};

/// Momentum SGD with coupled weight decay: v = mu v + (g + wd p); p -= lr v.
class Sgd {
 public:
  Sgd(std::vector<NamedTensor> params, double momentum, double weight_decay);
  void step(double lr);

 private:
  std::vector<NamedTensor> params_;
  std::vector<Vector<float>> velocity_;
  double momentum_, weight_decay_;
};

/// Throws ShapeError when the student cannot be distilled from the teacher:
/// differing input channels or class counts, or an empty map at `samd_stage`.
/// Differing map sizes are allowed; the teacher map is resized.
void check_stage_shapes(const Architecture& teacher, const Architecture& student, int samd_stage, Index height,
                        Index width);

struct TeacherView {
  TensorF logits;                // [N, K], no graph
  ActivationMap<float> cam;      // empty unless requested
};

/// Frozen-teacher forward plus, when `with_cam`, a backward pass confined to a
/// detached copy of the stage features that yields the CAM for `labels`.
TeacherView teacher_view(TeacherNet& net, const TensorF& images, std::span<const int> labels, int stage,
                         CamTarget target, bool with_cam);

/// SAM of `train` under the configured reduction.
ActivationMap<float> reduced_sam(const SpikeTrain<float>& train, SamReduce reduce);

/// Learning rate for `epoch` (0-based) under the configured schedule.
double scheduled_lr(const TrainConfig& config, int epoch);

/// Teacher trained with cross-entropy only.
RunResult train_teacher(const TrainConfig& config, const DataSplits& data);

/// Student trained with CE + beta SAMD + gamma NLD against a frozen teacher.
/// A null teacher, or beta = gamma = 0, trains the plain CE student.
RunResult distill_student(const TrainConfig& config, const Checkpoint* teacher, const DataSplits& data);

struct EvalResult {
  double accuracy = 0;
  double fire_rate = 0;
  std::array<SpikeCount, kStages> stage_counts{};
};

EvalResult evaluate_teacher(TeacherNet& net, const Dataset& data, Index batch_size = 256);
/// Noise-free, eval-mode pass.
EvalResult evaluate_student(StudentNet& net, const Dataset& data, Index time_steps, Index batch_size = 256);
/// Dispatches on the checkpoint kind; T is ignored for teachers.
EvalResult evaluate(const Checkpoint& checkpoint, const Dataset& data, Index time_steps);

struct AblationRow {
  std::string scale_mode;
  std::string noise_mode;
  std::string status;  // ok | diverged: <reason>
  double final_acc = 0, best_acc = 0, fire_rate = 0;
  double ce = 0, samd = 0, nld = 0, total = 0;  // last-epoch means
};

inline const std::vector<std::string>& ablation_scale_modes() {
  static const std::vector<std::string> modes{"softmax", "l2", "zscore", "none"};
  return modes;
}
inline const std::vector<std::string>& ablation_noise_modes() {
  static const std::vector<std::string> modes{"adaptive", "fixed:0.01", "fixed:0.1", "fixed:1", "none"};
  return modes;
}

/// Every scale mode crossed with every noise mode, each distilled from `teacher`
/// with the base config otherwise unchanged. Diverged runs are recorded and skipped.
std::vector<AblationRow> ablation_suite(const TrainConfig& base, const Checkpoint& teacher, const DataSplits& data,
                                        const std::function<void(const AblationRow&)>& on_row = {});
void write_ablation_csv(const std::vector<AblationRow>& rows, std::ostream& out);
void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path);

}  // namespace ckdsnn
