#include "ckdsnn/models.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace ckdsnn {

namespace {

constexpr Index kKernel = 3;
constexpr Index kPadding = 1;

Index conv_out(Index in, Index stride) {
  if (in + 2 * kPadding < kKernel) return 0;
  return (in + 2 * kPadding - kKernel) / stride + 1;
}

TensorF kaiming_uniform(Shape shape, Index fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Vector<float> v(shape_numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<float>(rng.uniform(-bound, bound));
  return TensorF(std::move(shape), std::move(v), true);
}

TensorF leaf_copy(const Shape& shape, const Vector<float>& values) { return TensorF(shape, values); }

}  // namespace

std::pair<Index, Index> Architecture::stage_hw(int stage, Index h, Index w) const {
  for (int s = 0; s < stage; ++s) {
    h = conv_out(h, strides[s]);
    w = conv_out(w, strides[s]);
  }
  return {h, w};
}

void Architecture::validate() const {
  if (in_channels < 1 || num_classes < 2) throw std::invalid_argument("Architecture: bad input channels or class count");
  for (int s = 0; s < kStages; ++s) {
    if (channels[s] < 1 || strides[s] < 1) throw std::invalid_argument("Architecture: bad stage configuration");
  }
}

std::vector<LayerMacs> layer_macs(const Architecture& arch, Index height, Index width) {
  std::vector<LayerMacs> out;
  Index in_c = arch.in_channels;
  for (int s = 0; s < kStages; ++s) {
    height = conv_out(height, arch.strides[s]);
    width = conv_out(width, arch.strides[s]);
    const double macs = static_cast<double>(arch.channels[s]) * static_cast<double>(in_c) * kKernel * kKernel *
                        static_cast<double>(height * width);
    out.push_back({"stage" + std::to_string(s + 1) + ".conv", macs});
    in_c = arch.channels[s];
  }
  out.push_back({"head", static_cast<double>(in_c * arch.num_classes)});
  return out;
}

TensorF ConvBnStage::forward(const TensorF& x, bool training) {
  BatchNormOptions<float> opt;
  opt.training = training;
  return batch_norm2d(conv2d(x, kernel, stride, kPadding), bn_weight, bn_bias, running_mean, running_var, opt);
}

ConvStack::ConvStack(const Architecture& arch, Rng& rng) : arch_(arch), normalizer_(Normalizer::identity(arch.in_channels)) {
  arch_.validate();
  Index in_c = arch.in_channels;
  for (int s = 0; s < kStages; ++s) {
    const Index out_c = arch.channels[s];
    auto& st = stages_[s];
    st.kernel = kaiming_uniform(Shape{out_c, in_c, kKernel, kKernel}, in_c * kKernel * kKernel, rng);
    st.bn_weight = TensorF::full(Shape{out_c}, 1.0f, true);
    st.bn_bias = TensorF::zeros(Shape{out_c}, true);
    st.running_mean = Vector<float>::Zero(out_c);
    st.running_var = Vector<float>::Ones(out_c);
    st.stride = arch.strides[s];
    in_c = out_c;
  }
  head_weight_ = kaiming_uniform(Shape{arch.num_classes, in_c}, in_c, rng);
  head_bias_ = TensorF::zeros(Shape{arch.num_classes}, true);
}

template <typename Self>
auto ConvStack::collect_parameters(Self& self) {
  using Ptr = decltype(&self.head_weight_);
  std::vector<std::pair<std::string, Ptr>> out;
  for (int s = 0; s < kStages; ++s) {
    const std::string p = "stage" + std::to_string(s + 1) + ".";
    out.emplace_back(p + "conv.weight", &self.stages_[s].kernel);
    out.emplace_back(p + "bn.weight", &self.stages_[s].bn_weight);
    out.emplace_back(p + "bn.bias", &self.stages_[s].bn_bias);
  }
  out.emplace_back("head.weight", &self.head_weight_);
  out.emplace_back("head.bias", &self.head_bias_);
  return out;
}

std::vector<NamedTensor> ConvStack::parameters() { return collect_parameters(*this); }

std::vector<std::pair<std::string, const TensorF*>> ConvStack::parameters() const { return collect_parameters(*this); }

void ConvStack::set_requires_grad(bool flag) {
  for (auto& [name, t] : parameters()) t->set_requires_grad(flag);
}

void ConvStack::zero_grad() {
  for (auto& [name, t] : parameters()) t->zero_grad();
}

std::map<std::string, TensorF> ConvStack::state() const {
  std::map<std::string, TensorF> out;
  for (const auto& [name, t] : parameters()) out.emplace(name, leaf_copy(t->shape(), t->data()));
  for (int s = 0; s < kStages; ++s) {
    const std::string p = "stage" + std::to_string(s + 1) + ".bn.";
    const Index c = stages_[s].running_mean.size();
    out.emplace(p + "running_mean", leaf_copy(Shape{c}, stages_[s].running_mean));
    out.emplace(p + "running_var", leaf_copy(Shape{c}, stages_[s].running_var));
  }
  Vector<float> arch(2 + 2 * kStages);
  arch[0] = static_cast<float>(arch_.in_channels);
  arch[1] = static_cast<float>(arch_.num_classes);
  for (int s = 0; s < kStages; ++s) {
    arch[2 + s] = static_cast<float>(arch_.channels[s]);
    arch[2 + kStages + s] = static_cast<float>(arch_.strides[s]);
  }
  out.emplace("meta.arch", TensorF(Shape{arch.size()}, arch));
  const Index c = arch_.in_channels;
  out.emplace("meta.norm_mean", TensorF(Shape{c}, Eigen::Map<const Vector<float>>(normalizer_.mean.data(), c)));
  out.emplace("meta.norm_std", TensorF(Shape{c}, Eigen::Map<const Vector<float>>(normalizer_.stddev.data(), c)));
  return out;
}

namespace {

const TensorF& require(const std::map<std::string, TensorF>& tensors, const std::string& name) {
  const auto it = tensors.find(name);
  if (it == tensors.end()) throw CheckpointError(CheckpointError::Kind::missing_tensor, "checkpoint lacks tensor " + name);
  return it->second;
}

void copy_checked(const std::map<std::string, TensorF>& tensors, const std::string& name, const Shape& shape,
                  Vector<float>& dst) {
  const TensorF& src = require(tensors, name);
  if (src.shape() != shape) {
    throw CheckpointError(CheckpointError::Kind::shape_mismatch, "checkpoint tensor " + name + " has shape " +
                                                                     shape_string(src.shape()) + ", model expects " +
                                                                     shape_string(shape));
  }
  dst = src.data();
}

Architecture read_architecture(const Checkpoint& ckpt) {
  const TensorF& a = require(ckpt.tensors, "meta.arch");
  if (a.numel() != 2 + 2 * kStages) throw CheckpointError(CheckpointError::Kind::corrupt, "meta.arch has wrong length");
  Architecture arch;
  arch.in_channels = static_cast<Index>(a[0]);
  arch.num_classes = static_cast<Index>(a[1]);
  for (int s = 0; s < kStages; ++s) {
    arch.channels[s] = static_cast<Index>(a[2 + s]);
    arch.strides[s] = static_cast<Index>(a[2 + kStages + s]);
  }
  try {
    arch.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(CheckpointError::Kind::corrupt, e.what());
  }
  return arch;
}

}  // namespace

void ConvStack::load_state(const std::map<std::string, TensorF>& tensors) {
  for (auto& [name, t] : parameters()) {
    const Shape shape = t->shape();
    copy_checked(tensors, name, shape, t->mutable_data());
  }
  for (int s = 0; s < kStages; ++s) {
    const std::string p = "stage" + std::to_string(s + 1) + ".bn.";
    const Shape shape{arch_.channels[s]};
    copy_checked(tensors, p + "running_mean", shape, stages_[s].running_mean);
    copy_checked(tensors, p + "running_var", shape, stages_[s].running_var);
  }
  Vector<float> m, sd;
  copy_checked(tensors, "meta.norm_mean", Shape{arch_.in_channels}, m);
  copy_checked(tensors, "meta.norm_std", Shape{arch_.in_channels}, sd);
  normalizer_.mean.assign(m.data(), m.data() + m.size());
  normalizer_.stddev.assign(sd.data(), sd.data() + sd.size());
}

TensorF ConvStack::head(const TensorF& pooled_features) { return linear(pooled_features, head_weight_, head_bias_); }

TensorF ConvStack::normalized(const TensorF& images) const {
  if (images.rank() != 4 || images.dim(1) != arch_.in_channels) {
    throw ShapeError("model expects input [N," + std::to_string(arch_.in_channels) + ",H,W], got " +
                     shape_string(images.shape()));
  }
  return normalizer_.apply(images);
}

// ---------------------------------------------------------------------------

TeacherNet::Output TeacherNet::forward(const TensorF& images) {
  Output out;
  TensorF x = normalized(images);
  for (int s = 0; s < kStages; ++s) {
    x = relu(stages_[s].forward(x, training_));
    out.stage_features[s] = x;
  }
  out.logits = head(global_avg_pool2d(x));
  return out;
}

TensorF TeacherNet::forward_from(int stage, const TensorF& features) {
  if (stage < 1 || stage > kStages) throw std::invalid_argument("forward_from: stage must be in [1, 4]");
  TensorF x = features;
  for (int s = stage; s < kStages; ++s) x = relu(stages_[s].forward(x, training_));
  return head(global_avg_pool2d(x));
}

StudentNet::StudentNet(const Architecture& arch, const NeuronParams& neuron, Rng& rng)
    : ConvStack(arch, rng), neuron_(neuron) {
  neuron_.validate();
}

StudentNet::Output StudentNet::forward(const TensorF& images, Index time_steps) {
  if (time_steps < 1) throw std::invalid_argument("student_forward: time steps must be >= 1");
  Output out;
  const Index n = images.dim(0);
  // The first stage sees the same image at every step, so its conv/BN output
  // is computed once and tiled across time.
  TensorF x = repeat_leading(stages_[0].forward(normalized(images), training_), time_steps);
  for (int s = 0; s < kStages; ++s) {
    if (s > 0) x = stages_[s].forward(x, training_);
    x = if_neuron(x, time_steps, neuron_);
    Shape shape = x.shape();
    shape[0] = n;
    shape.insert(shape.begin(), time_steps);
    out.stage_spikes[s] = {reshape(x, shape), time_steps};
  }
  out.logits = head_from_spikes(out.stage_spikes[kStages - 1].spikes);
  return out;
}

TensorF StudentNet::head_from_spikes(const TensorF& spikes) {
  detail::require_rank("head_from_spikes", spikes, 5);
  return head(global_avg_pool2d(mean(spikes, 0)));
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'C', 'K', 'D', 'S'};

void put_u32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 24)};
  out.write(b, 4);
}

class Reader {
 public:
  Reader(std::vector<unsigned char> bytes, std::string name) : bytes_(std::move(bytes)), name_(std::move(name)) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) {
      throw CheckpointError(CheckpointError::Kind::corrupt, name_ + ": corrupt checkpoint (truncated at byte " +
                                                                std::to_string(pos_) + ")");
    }
  }
  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    const std::uint32_t v = std::uint32_t{bytes_[pos_]} | (std::uint32_t{bytes_[pos_ + 1]} << 8) |
                            (std::uint32_t{bytes_[pos_ + 2]} << 16) | (std::uint32_t{bytes_[pos_ + 3]} << 24);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::vector<unsigned char> bytes_;
  std::string name_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot write checkpoint " + path.string());
  out.write(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(checkpoint.tensors.size()));
  for (const auto& [name, t] : checkpoint.tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    out.put(0);
    out.put(static_cast<char>(t.rank()));
    for (Index d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (Index i = 0; i < t.numel(); ++i) put_u32(out, std::bit_cast<std::uint32_t>(t[i]));
  }
  if (!out) throw CheckpointError(CheckpointError::Kind::io, "failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::io, "checkpoint not found: " + path.string());
  Reader r({std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()}, path.string());
  try {
    if (r.str(4) != std::string(kMagic, 4)) {
      throw CheckpointError(CheckpointError::Kind::bad_magic, path.string() + ": not a checkpoint (bad magic)");
    }
  } catch (const CheckpointError& e) {
    if (e.kind() == CheckpointError::Kind::corrupt) {
      throw CheckpointError(CheckpointError::Kind::bad_magic, path.string() + ": not a checkpoint (too short)");
    }
    throw;
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointError::Kind::bad_version,
                          path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint out;
  const std::uint32_t count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string name = r.str(r.u32());
    if (r.u8() != 0) throw CheckpointError(CheckpointError::Kind::corrupt, path.string() + ": unknown dtype in " + name);
    const int rank = r.u8();
    Shape shape;
    for (int d = 0; d < rank; ++d) shape.push_back(r.u32());
    const Index n = shape_numel(shape);
    r.need(static_cast<std::size_t>(n) * 4);
    Vector<float> values(n);
    for (Index i = 0; i < n; ++i) values[i] = r.f32();
    out.tensors.emplace(name, TensorF(std::move(shape), std::move(values)));
  }
  if (!r.done()) throw CheckpointError(CheckpointError::Kind::corrupt, path.string() + ": trailing bytes");
  return out;
}

ModelKind checkpoint_kind(const Checkpoint& checkpoint) {
  const TensorF& kind = require(checkpoint.tensors, "meta.kind");
  if (kind.numel() != 1) throw CheckpointError(CheckpointError::Kind::corrupt, "meta.kind has wrong length");
  return kind[0] == 0.0f ? ModelKind::teacher : ModelKind::student;
}

Checkpoint to_checkpoint(const TeacherNet& net) {
  Checkpoint c{net.state()};
  c.tensors.emplace("meta.kind", TensorF(Shape{1}, {0.0f}));
  return c;
}

Checkpoint to_checkpoint(const StudentNet& net) {
  Checkpoint c{net.state()};
  c.tensors.emplace("meta.kind", TensorF(Shape{1}, {1.0f}));
  const auto& p = net.neuron();
  c.tensors.emplace("meta.neuron", TensorF(Shape{3}, {static_cast<float>(p.v_threshold), static_cast<float>(p.v_reset),
                                                      static_cast<float>(p.surrogate_steepness)}));
  return c;
}

TeacherNet teacher_from_checkpoint(const Checkpoint& checkpoint) {
  if (checkpoint_kind(checkpoint) != ModelKind::teacher) {
    throw CheckpointError(CheckpointError::Kind::wrong_model, "checkpoint holds a student, expected a teacher");
  }
  Rng rng(0);
  TeacherNet net(read_architecture(checkpoint), rng);
  net.load_state(checkpoint.tensors);
  return net;
}

StudentNet student_from_checkpoint(const Checkpoint& checkpoint) {
  if (checkpoint_kind(checkpoint) != ModelKind::student) {
    throw CheckpointError(CheckpointError::Kind::wrong_model, "checkpoint holds a teacher, expected a student");
  }
  const TensorF& n = require(checkpoint.tensors, "meta.neuron");
  if (n.numel() != 3) throw CheckpointError(CheckpointError::Kind::corrupt, "meta.neuron has wrong length");
  NeuronParams params{n[0], n[1], n[2]};
  Rng rng(0);
  StudentNet net(read_architecture(checkpoint), params, rng);
  net.load_state(checkpoint.tensors);
  return net;
}

}  // namespace ckdsnn
