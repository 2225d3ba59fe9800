#include "ckdsnn/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

namespace ckdsnn {

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  return out;
}

using Clock = std::chrono::steady_clock;

double elapsed(Clock::time_point since, bool deterministic) {
  if (deterministic) return 0.0;
  return std::chrono::duration<double>(Clock::now() - since).count();
}

void accumulate(EpochMetrics& m, const StepLoss& s, double weight) {
  m.ce += s.ce * weight;
  m.samd += s.samd * weight;
  m.nld += s.nld * weight;
  m.total += s.total * weight;
}

TensorF maybe_augment(const TrainConfig& config, const TensorF& images, Rng& rng) {
  return config.augment ? augment(images, config.augment_config, rng) : images;
}

bool evaluate_now(const TrainConfig& config, int epoch) {
  return (epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs;
}

void persist(const TrainConfig& config, const RunResult& r) {
  if (config.out_dir.empty()) return;
  std::filesystem::create_directories(config.out_dir);
  save_checkpoint(r.best, config.out_dir / "best.ckpt");
  save_checkpoint(r.last, config.out_dir / "last.ckpt");
  write_metrics_csv(r.metrics, config.out_dir / "metrics.csv");
  std::ofstream(config.out_dir / "config.json") << config.to_json().dump(2) << '\n';
}

}  // namespace

std::string to_string(Schedule s) { return s == Schedule::cosine ? "cosine" : "constant"; }
std::string to_string(CamTarget t) { return t == CamTarget::class_logit ? "class_logit" : "log_prob"; }

Schedule parse_schedule(std::string_view text) {
  if (text == "cosine") return Schedule::cosine;
  if (text == "constant") return Schedule::constant;
  throw std::invalid_argument("unknown schedule '" + std::string(text) + "' (cosine|constant)");
}

std::string to_string(SamReduce r) { return r == SamReduce::sum ? "sum" : "mean"; }

SamReduce parse_sam_reduce(std::string_view text) {
  if (text == "sum") return SamReduce::sum;
  if (text == "mean") return SamReduce::mean;
  throw std::invalid_argument("unknown SAM reduction '" + std::string(text) + "' (sum|mean)");
}

CamTarget parse_cam_target(std::string_view text) {
  if (text == "class_logit") return CamTarget::class_logit;
  if (text == "log_prob") return CamTarget::log_prob;
  throw std::invalid_argument("unknown CAM target '" + std::string(text) + "' (class_logit|log_prob)");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch size must be >= 1");
  if (!(lr >= 0) || !std::isfinite(lr)) throw std::invalid_argument("TrainConfig: lr must be finite and >= 0");
  if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("TrainConfig: momentum must be in [0, 1)");
  if (!(weight_decay >= 0)) throw std::invalid_argument("TrainConfig: weight decay must be >= 0");
  if (time_steps < 1) throw std::invalid_argument("TrainConfig: time steps must be >= 1");
  if (samd_stage < 1 || samd_stage > kStages) throw std::invalid_argument("TrainConfig: samd stage must be in [1, 4]");
  if (eval_every < 1) throw std::invalid_argument("TrainConfig: eval_every must be >= 1");
  weights.validate();
  noise.validate();
  neuron.validate();
  architecture(1, 2).validate();
}

Architecture TrainConfig::architecture(Index in_channels, Index num_classes) const {
  return {in_channels, num_classes, channels, strides};
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["lr"] = lr;
  j["momentum"] = momentum;
  j["weight_decay"] = weight_decay;
  j["schedule"] = to_string(schedule);
  j["seed"] = seed;
  j["time_steps"] = time_steps;
  j["beta"] = weights.beta;
  j["gamma"] = weights.gamma;
  j["lambda"] = noise.lambda;
  j["temp_logits"] = weights.tau;
  j["temp_map"] = weights.temp_map;
  j["scale_mode"] = to_string(scale);
  j["noise_mode"] = to_string(noise);
  j["population_std"] = noise.population_std;
  j["samd_stage"] = samd_stage;
  j["cam_target"] = to_string(cam_target);
  j["sam_reduce"] = to_string(sam_reduce);
  j["channels"] = channels;
  j["strides"] = strides;
  j["neuron"] = {{"v_threshold", neuron.v_threshold},
                 {"v_reset", neuron.v_reset},
                 {"surrogate_steepness", neuron.surrogate_steepness}};
  j["dataset"] = to_string(data.kind);
  j["data_dir"] = data.data_dir.string();
  j["train_size"] = data.train_size;
  j["test_size"] = data.test_size;
  j["synth_image_size"] = data.synth_image_size;
  j["data_seed"] = data.seed;
  j["augment"] = augment;
  j["crop_pad"] = augment_config.crop_pad;
  j["hflip"] = augment_config.hflip;
  j["deterministic"] = deterministic;
  j["eval_every"] = eval_every;
  j["out"] = out_dir.string();
  return j;
}

void write_metrics_csv(const RunMetrics& metrics, std::ostream& out) {
  out << kMetricsHeader << '\n';
  for (const auto& e : metrics.epochs) {
    out << e.epoch << ',' << num(e.ce) << ',' << num(e.samd) << ',' << num(e.nld) << ',' << num(e.total) << ','
        << num(e.test_acc) << ',' << num(e.fire_rate) << ',' << num(e.seconds) << '\n';
  }
}

void write_metrics_csv(const RunMetrics& metrics, const std::filesystem::path& path) {
  auto out = open_out(path);
  write_metrics_csv(metrics, out);
}

Sgd::Sgd(std::vector<NamedTensor> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  for (const auto& [name, t] : params_) velocity_.push_back(Vector<float>::Zero(t->numel()));
}

void Sgd::step(double lr) {
  const auto mu = static_cast<float>(momentum_);
  const auto wd = static_cast<float>(weight_decay_);
  const auto rate = static_cast<float>(lr);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    TensorF& p = *params_[i].second;
    if (!p.has_grad()) continue;
    Vector<float>& v = velocity_[i];
    v = mu * v + (p.grad() + wd * p.data());
    p.mutable_data() -= rate * v;
    p.zero_grad();
  }
}

ActivationMap<float> reduced_sam(const SpikeTrain<float>& train, SamReduce reduce) {
  auto sam = sam_generate(train);
  if (reduce == SamReduce::mean) {
    sam.values = scale(sam.values, 1.0f / static_cast<float>(train.time_steps * train.spikes.dim(2)));
  }
  return sam;
}

double scheduled_lr(const TrainConfig& config, int epoch) {
  if (config.schedule == Schedule::constant) return config.lr;
  return 0.5 * config.lr * (1.0 + std::cos(std::numbers::pi * epoch / config.epochs));
}

void check_stage_shapes(const Architecture& teacher, const Architecture& student, int samd_stage, Index height,
                        Index width) {
  if (teacher.in_channels != student.in_channels) {
    throw ShapeError("teacher takes " + std::to_string(teacher.in_channels) + " input channels, student " +
                     std::to_string(student.in_channels));
  }
  if (teacher.num_classes != student.num_classes) {
    throw ShapeError("teacher predicts " + std::to_string(teacher.num_classes) + " classes, student " +
                     std::to_string(student.num_classes));
  }
  const auto [th, tw] = teacher.stage_hw(samd_stage, height, width);
  const auto [sh, sw] = student.stage_hw(samd_stage, height, width);
  if (th < 1 || tw < 1 || sh < 1 || sw < 1) {
    throw ShapeError("stage " + std::to_string(samd_stage) + " map is empty for a " + std::to_string(height) + "x" +
                     std::to_string(width) + " input");
  }
}

// ---------------------------------------------------------------------------

EvalResult evaluate_teacher(TeacherNet& net, const Dataset& data, Index batch_size) {
  NoGradGuard guard;
  const bool was_training = net.training();
  net.eval();
  Index correct = 0;
  for (const auto& b : BatchIterator(data, batch_size, 0, false).batches(0)) {
    const auto pred = argmax_rows(net.forward(b.images).logits);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == b.labels[i] ? 1 : 0;
  }
  net.train(was_training);
  EvalResult r;
  r.accuracy = data.size() ? 100.0 * static_cast<double>(correct) / static_cast<double>(data.size()) : 0.0;
  return r;
}

EvalResult evaluate_student(StudentNet& net, const Dataset& data, Index time_steps, Index batch_size) {
  NoGradGuard guard;
  const bool was_training = net.training();
  net.eval();
  EvalResult r;
  Index correct = 0;
  for (const auto& b : BatchIterator(data, batch_size, 0, false).batches(0)) {
    const auto out = net.forward(b.images, time_steps);
    const auto pred = argmax_rows(out.logits);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == b.labels[i] ? 1 : 0;
    for (int s = 0; s < kStages; ++s) r.stage_counts[s].add(out.stage_spikes[s]);
  }
  net.train(was_training);
  r.accuracy = data.size() ? 100.0 * static_cast<double>(correct) / static_cast<double>(data.size()) : 0.0;
  SpikeCount all;
  for (const auto& c : r.stage_counts) all.add(c);
  r.fire_rate = all.total ? all.percent() : 0.0;
  return r;
}

EvalResult evaluate(const Checkpoint& checkpoint, const Dataset& data, Index time_steps) {
  if (checkpoint_kind(checkpoint) == ModelKind::teacher) {
    TeacherNet net = teacher_from_checkpoint(checkpoint);
    return evaluate_teacher(net, data);
  }
  StudentNet net = student_from_checkpoint(checkpoint);
  return evaluate_student(net, data, time_steps);
}

TeacherView teacher_view(TeacherNet& net, const TensorF& images, std::span<const int> labels, int stage,
                         CamTarget target, bool with_cam) {
  if (stage < 1 || stage > kStages) throw std::invalid_argument("teacher_view: stage must be in [1, 4]");
  TeacherNet::Output out;
  {
    NoGradGuard guard;
    out = net.forward(images);
  }
  TeacherView view{out.logits, {}};
  if (!with_cam) return view;
  const TensorF& feats = out.stage_features[stage - 1];
  TensorF leaf = feats.detach();
  leaf.set_requires_grad(true);
  const TensorF logits = net.forward_from(stage, leaf);
  const TensorF score =
      target == CamTarget::class_logit ? sum(pick(logits, labels)) : sum(pick(log_softmax(logits, 1), labels));
  backward(score);
  view.cam = cam_generate(feats, TensorF(leaf.shape(), leaf.grad()), MapSource::teacher_cam);
  return view;
}

// ---------------------------------------------------------------------------

RunResult train_teacher(const TrainConfig& config, const DataSplits& data) {
  config.validate();
  const Rng root(config.seed);
  Rng init = root.fork(streams::init);
  Rng aug = root.fork(streams::augment);
  TeacherNet net(config.architecture(data.train.channels(), data.train.num_classes), init);
  net.set_normalizer(Normalizer::fit(data.train));
  Sgd opt(net.parameters(), config.momentum, config.weight_decay);
  const BatchIterator batches(data.train, config.batch_size, root.fork(streams::shuffle).seed());

  RunResult result;
  result.best_accuracy = -1;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = Clock::now();
    const double lr = scheduled_lr(config, epoch);
    net.train();
    EpochMetrics m;
    m.epoch = epoch + 1;
    const auto list = batches.batches(epoch);
    for (std::size_t step = 0; step < list.size(); ++step) {
      const auto& b = list[step];
      StepLoss s;
      try {
        const TensorF ce = cross_entropy(net.forward(maybe_augment(config, b.images, aug)).logits, b.labels);
        s.ce = s.total = ce.item();
        if (!std::isfinite(s.ce)) throw NonFiniteError("non-finite ce term");
        backward(ce);
      } catch (const NonFiniteError& e) {
        throw DivergenceError("teacher training diverged at epoch " + std::to_string(epoch + 1) + ", step " +
                              std::to_string(step + 1) + ": " + e.what());
      }
      opt.step(lr);
      result.metrics.steps.push_back(s);
      accumulate(m, s, 1.0 / static_cast<double>(list.size()));
    }
    if (evaluate_now(config, epoch)) {
      m.test_acc = evaluate_teacher(net, data.test).accuracy;
      if (m.test_acc > result.best_accuracy) {
        result.best_accuracy = m.test_acc;
        result.best = to_checkpoint(net);
      }
    }
    m.seconds = elapsed(start, config.deterministic);
    result.metrics.epochs.push_back(m);
    if (config.on_epoch) config.on_epoch(m);
  }
  result.final_accuracy = result.metrics.epochs.back().test_acc;
  result.last = to_checkpoint(net);
  persist(config, result);
  return result;
}

RunResult distill_student(const TrainConfig& config, const Checkpoint* teacher, const DataSplits& data) {
  config.validate();
  const LossWeights& w = config.weights;
  const Architecture arch = config.architecture(data.train.channels(), data.train.num_classes);
  const bool use_teacher = teacher != nullptr && (w.beta > 0 || w.gamma > 0);

  std::optional<TeacherNet> tnet;
  if (use_teacher) {
    if (checkpoint_kind(*teacher) != ModelKind::teacher) {
      throw CheckpointError(CheckpointError::Kind::wrong_model, "distillation needs a teacher checkpoint");
    }
    tnet.emplace(teacher_from_checkpoint(*teacher));
    check_stage_shapes(tnet->architecture(), arch, config.samd_stage, data.train.height(), data.train.width());
    tnet->eval();
    tnet->set_requires_grad(false);
  }

  const Rng root(config.seed);
  Rng init = root.fork(streams::init);
  Rng aug = root.fork(streams::augment);
  Rng noise_rng = root.fork(streams::noise);
  StudentNet net(arch, config.neuron, init);
  net.set_normalizer(Normalizer::fit(data.train));
  Sgd opt(net.parameters(), config.momentum, config.weight_decay);
  const BatchIterator batches(data.train, config.batch_size, root.fork(streams::shuffle).seed());
  const int stage = config.samd_stage;
  const Index T = config.time_steps;

  RunResult result;
  result.best_accuracy = -1;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = Clock::now();
    const double lr = scheduled_lr(config, epoch);
    net.train();
    EpochMetrics m;
    m.epoch = epoch + 1;
    const auto list = batches.batches(epoch);
    for (std::size_t step = 0; step < list.size(); ++step) {
      const auto& b = list[step];
      StepLoss s;
      try {
        const TensorF images = maybe_augment(config, b.images, aug);
        const auto out = net.forward(images, T);
        const TensorF ce = cross_entropy(out.logits, b.labels);
        std::optional<TensorF> samd, nld;
        if (tnet) {
          const TeacherView tv = teacher_view(*tnet, images, b.labels, stage, config.cam_target, w.beta > 0);
          if (w.beta > 0) {
            const auto sam = reduced_sam(out.stage_spikes[stage - 1], config.sam_reduce);
            const ActivationMap<float> cam{resize_bilinear(tv.cam.values, sam.height(), sam.width()), tv.cam.source};
            samd = samd_loss(cam, sam, config.scale_mode());
          }
          if (w.gamma > 0) {
            const TensorF eps = sample_noise(out.logits.detach(), config.noise, noise_rng);
            nld = nld_loss(tv.logits, smooth_logits(out.logits, eps, config.noise.lambda), w.tau);
          }
        }
        const auto loss = total_loss(ce, samd ? &*samd : nullptr, nld ? &*nld : nullptr, w);
        s = {loss.ce, loss.samd, loss.nld, static_cast<double>(loss.total.item())};
        if (!std::isfinite(s.total)) throw NonFiniteError("non-finite total loss");
        backward(loss.total);
      } catch (const NonFiniteError& e) {
        throw DivergenceError("distillation diverged at epoch " + std::to_string(epoch + 1) + ", step " +
                              std::to_string(step + 1) + ": " + e.what());
      }
      opt.step(lr);
      result.metrics.steps.push_back(s);
      accumulate(m, s, 1.0 / static_cast<double>(list.size()));
    }
    if (evaluate_now(config, epoch)) {
      const EvalResult ev = evaluate_student(net, data.test, T);
      m.test_acc = ev.accuracy;
      m.fire_rate = ev.fire_rate;
      if (m.test_acc > result.best_accuracy) {
        result.best_accuracy = m.test_acc;
        result.best = to_checkpoint(net);
      }
    }
    m.seconds = elapsed(start, config.deterministic);
    result.metrics.epochs.push_back(m);
    if (config.on_epoch) config.on_epoch(m);
  }
  result.final_accuracy = result.metrics.epochs.back().test_acc;
  result.final_fire_rate = result.metrics.epochs.back().fire_rate;
  result.last = to_checkpoint(net);
  persist(config, result);
  return result;
}

// ---------------------------------------------------------------------------

std::vector<AblationRow> ablation_suite(const TrainConfig& base, const Checkpoint& teacher, const DataSplits& data,
                                        const std::function<void(const AblationRow&)>& on_row) {
  std::vector<AblationRow> rows;
  for (const auto& scale : ablation_scale_modes()) {
    for (const auto& noise : ablation_noise_modes()) {
      TrainConfig config = base;
      config.scale = parse_scale_kind(scale);
      config.noise = parse_noise_mode(noise, base.noise.lambda);
      config.noise.population_std = base.noise.population_std;
      if (!base.out_dir.empty()) config.out_dir = base.out_dir / (scale + "_" + noise);
      AblationRow row{scale, noise, "ok"};
      try {
        const RunResult r = distill_student(config, &teacher, data);
        const EpochMetrics& last = r.metrics.epochs.back();
        row.final_acc = r.final_accuracy;
        row.best_acc = r.best_accuracy;
        row.fire_rate = r.final_fire_rate;
        row.ce = last.ce;
        row.samd = last.samd;
        row.nld = last.nld;
        row.total = last.total;
      } catch (const NonFiniteError& e) {
        row.status = std::string("diverged: ") + e.what();
      }
      if (on_row) on_row(row);
      rows.push_back(row);
    }
  }
  return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, std::ostream& out) {
  out << "scale_mode,noise_mode,status,final_acc,best_acc,fire_rate,ce,samd,nld,total\n";
  for (const auto& r : rows) {
    std::string status = r.status;
    for (char& c : status)
      if (c == ',' || c == '\n') c = ';';
    out << r.scale_mode << ',' << r.noise_mode << ',' << status << ',' << num(r.final_acc) << ',' << num(r.best_acc)
        << ',' << num(r.fire_rate) << ',' << num(r.ce) << ',' << num(r.samd) << ',' << num(r.nld) << ','
        << num(r.total) << '\n';
  }
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path) {
  auto out = open_out(path);
  write_ablation_csv(rows, out);
}

}  // namespace ckdsnn
