#include "ckdsnn/cli.hpp"

#include "ckdsnn/train.hpp"

#include <CLI11.hpp>
#include <Eigen/Core>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace ckdsnn {

namespace {

using nlohmann::json;

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Options {
  // data
  std::string dataset = "synthetic";
  std::string data_dir;
  Index train_size = 4000;
  Index test_size = 1000;
  Index image_size = 16;
  std::uint64_t data_seed = 0;
  // training
  int epochs = 20;
  Index batch_size = 64;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::string schedule = "cosine";
  std::uint64_t seed = 1;
  Index time_steps = 4;
  double beta = 1.0;
  double gamma = 1.0;
  double lambda = 0.1;
  double temp_map = 2.0;
  double temp_logits = 2.0;
  std::string scale_mode = "softmax";
  std::string noise_mode = "adaptive";
  bool sample_std = false;
  int samd_stage = 4;
  std::string cam_target = "class_logit";
  std::string sam_reduce = "mean";
  std::string arch = "tiny";
  std::string strides = "1,2,2,2";
  bool augment = false;
  int eval_every = 1;
  bool deterministic = false;
  std::string out;
  // models and outputs
  std::string teacher;
  std::string student;
  Index index = 0;
  double e_ac = 0.9;
  double e_mac = 4.6;
};

void add_data_options(CLI::App& app, Options& o) {
  app.add_option("--dataset", o.dataset, "mnist | cifar10 | synthetic")->capture_default_str();
  app.add_option("--data-dir", o.data_dir, "dataset root (see README for the layout)");
  app.add_option("--train-size", o.train_size, "training samples, 0 = full split")->capture_default_str();
  app.add_option("--test-size", o.test_size, "test samples, 0 = full split")->capture_default_str();
  app.add_option("--image-size", o.image_size, "synthetic image side")->capture_default_str();
  app.add_option("--data-seed", o.data_seed, "synthetic dataset seed")->capture_default_str();
}

void add_run_options(CLI::App& app, Options& o) {
  app.add_option("--time-steps", o.time_steps, "student time steps T")->capture_default_str();
  app.add_option("--seed", o.seed, "root seed")->capture_default_str();
  app.add_flag("--deterministic", o.deterministic, "single-threaded, wall time recorded as 0");
}

void add_train_options(CLI::App& app, Options& o) {
  add_data_options(app, o);
  add_run_options(app, o);
  app.add_option("--epochs", o.epochs)->capture_default_str();
  app.add_option("--batch-size", o.batch_size)->capture_default_str();
  app.add_option("--lr", o.lr)->capture_default_str();
  app.add_option("--momentum", o.momentum)->capture_default_str();
  app.add_option("--weight-decay", o.weight_decay)->capture_default_str();
  app.add_option("--schedule", o.schedule, "cosine | constant")->capture_default_str();
  app.add_option("--beta", o.beta, "SAMD weight")->capture_default_str();
  app.add_option("--gamma", o.gamma, "NLD weight")->capture_default_str();
  app.add_option("--lambda", o.lambda, "noise mixing weight")->capture_default_str();
  app.add_option("--temp-map", o.temp_map, "saliency temperature")->capture_default_str();
  app.add_option("--temp-logits", o.temp_logits, "logits temperature")->capture_default_str();
  app.add_option("--scale-mode", o.scale_mode, "softmax | l2 | zscore | none")->capture_default_str();
  app.add_option("--noise-mode", o.noise_mode, "adaptive | fixed:<std> | none")->capture_default_str();
  app.add_flag("--sample-std", o.sample_std, "adaptive noise std divides by K - 1");
  app.add_option("--samd-stage", o.samd_stage, "stage (1-4) whose maps are aligned")->capture_default_str();
  app.add_option("--cam-target", o.cam_target, "class_logit | log_prob")->capture_default_str();
  app.add_option("--sam-reduce", o.sam_reduce, "spike map fed to the scaling: sum | mean")->capture_default_str();
  app.add_option("--arch", o.arch, "tiny | reference | four comma-separated stage widths")->capture_default_str();
  app.add_option("--strides", o.strides, "four comma-separated stage strides")->capture_default_str();
  app.add_flag("--augment", o.augment, "random crop (pad 4) and horizontal flip");
  app.add_option("--eval-every", o.eval_every, "test evaluation cadence in epochs")->capture_default_str();
  app.add_option("--out", o.out, "output directory");
}

std::array<Index, kStages> parse_quad(const std::string& flag, const std::string& text) {
  std::array<Index, kStages> out{};
  std::stringstream ss(text);
  std::string item;
  int n = 0;
  while (std::getline(ss, item, ',')) {
    if (n == kStages) throw UsageError(flag + " takes exactly four values");
    try {
      std::size_t used = 0;
      out[n] = std::stoll(item, &used);
      if (used != item.size() || out[n] < 1) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError(flag + ": bad value '" + item + "'");
    }
    ++n;
  }
  if (n != kStages) throw UsageError(flag + " takes exactly four values");
  return out;
}

template <typename F>
auto as_usage(F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

DataRequest data_request(const Options& o) {
  DataRequest r;
  r.kind = as_usage([&] { return parse_dataset_kind(o.dataset); });
  r.data_dir = o.data_dir;
  if (r.kind != DatasetKind::synthetic && o.data_dir.empty()) throw UsageError("--data-dir is required for " + o.dataset);
  r.train_size = o.train_size;
  r.test_size = o.test_size;
  r.synth_image_size = o.image_size;
  r.seed = o.data_seed;
  return r;
}

TrainConfig train_config(const Options& o) {
  TrainConfig c;
  c.epochs = o.epochs;
  c.batch_size = o.batch_size;
  c.lr = o.lr;
  c.momentum = o.momentum;
  c.weight_decay = o.weight_decay;
  c.schedule = as_usage([&] { return parse_schedule(o.schedule); });
  c.seed = o.seed;
  c.time_steps = o.time_steps;
  c.weights = {o.beta, o.gamma, o.temp_logits, o.temp_map};
  c.noise = as_usage([&] { return parse_noise_mode(o.noise_mode, o.lambda); });
  c.noise.population_std = !o.sample_std;
  c.scale = as_usage([&] { return parse_scale_kind(o.scale_mode); });
  c.samd_stage = o.samd_stage;
  c.cam_target = as_usage([&] { return parse_cam_target(o.cam_target); });
  c.sam_reduce = as_usage([&] { return parse_sam_reduce(o.sam_reduce); });
  if (o.arch == "tiny") {
    c.channels = Architecture::tiny(1, 2).channels;
  } else if (o.arch == "reference") {
    c.channels = Architecture::reference(1, 2).channels;
  } else {
    c.channels = parse_quad("--arch", o.arch);
  }
  c.strides = parse_quad("--strides", o.strides);
  c.data = data_request(o);
  c.augment = o.augment;
  c.deterministic = o.deterministic;
  c.eval_every = o.eval_every;
  c.out_dir = o.out;
  as_usage([&] {
    c.validate();
    return 0;
  });
  return c;
}

void echo_config(std::ostream& out, const std::string& command, json config) {
  out << json{{"command", command}, {"config", std::move(config)}}.dump() << std::endl;
}

void echo_result(std::ostream& out, json result) { out << json{{"result", std::move(result)}}.dump() << std::endl; }

void progress(std::ostream& err, const EpochMetrics& m) {
  err << "epoch " << m.epoch << "  ce " << m.ce << "  samd " << m.samd << "  nld " << m.nld << "  total " << m.total
      << "  test_acc " << m.test_acc << "  fire_rate " << m.fire_rate << std::endl;
}

json data_json(const DataRequest& r) {
  return {{"dataset", to_string(r.kind)},   {"data_dir", r.data_dir.string()}, {"train_size", r.train_size},
          {"test_size", r.test_size},       {"image_size", r.synth_image_size}, {"data_seed", r.seed}};
}

// ---------------------------------------------------------------------------

int cmd_train_teacher(const Options& o, std::ostream& out, std::ostream& err) {
  TrainConfig c = train_config(o);
  c.on_epoch = [&err](const EpochMetrics& m) { progress(err, m); };
  echo_config(out, "train-teacher", c.to_json());
  const DataSplits data = load_splits(c.data);
  const RunResult r = train_teacher(c, data);
  echo_result(out, {{"final_acc", r.final_accuracy}, {"best_acc", r.best_accuracy}, {"out", c.out_dir.string()}});
  return 0;
}

TrainConfig distill_config(const Options& o, const CLI::App& app, const Checkpoint& teacher) {
  TrainConfig c = train_config(o);
  const Architecture ta = teacher_from_checkpoint(teacher).architecture();
  if (app.count("--arch") == 0) c.channels = ta.channels;
  if (app.count("--strides") == 0) c.strides = ta.strides;
  return c;
}

Checkpoint load_teacher_checkpoint(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  if (checkpoint_kind(ckpt) != ModelKind::teacher) {
    throw CheckpointError(CheckpointError::Kind::wrong_model, path + " is not a teacher checkpoint");
  }
  return ckpt;
}

int cmd_distill(const Options& o, const CLI::App& app, std::ostream& out, std::ostream& err) {
  train_config(o);  // usage errors before any file access
  const Checkpoint teacher = load_teacher_checkpoint(o.teacher);
  TrainConfig c = distill_config(o, app, teacher);
  c.on_epoch = [&err](const EpochMetrics& m) { progress(err, m); };
  json cj = c.to_json();
  cj["teacher"] = o.teacher;
  echo_config(out, "distill", cj);
  const DataSplits data = load_splits(c.data);
  const RunResult r = distill_student(c, &teacher, data);
  echo_result(out, {{"final_acc", r.final_accuracy},
                    {"best_acc", r.best_accuracy},
                    {"fire_rate", r.final_fire_rate},
                    {"out", c.out_dir.string()}});
  return 0;
}

int cmd_eval(const Options& o, std::ostream& out) {
  if (o.teacher.empty() == o.student.empty()) throw UsageError("eval takes exactly one of --teacher or --student");
  if (o.time_steps < 1) throw UsageError("--time-steps must be >= 1");
  const DataRequest req = data_request(o);
  const std::string path = o.teacher.empty() ? o.student : o.teacher;
  const Checkpoint ckpt = load_checkpoint(path);
  const bool is_teacher = checkpoint_kind(ckpt) == ModelKind::teacher;
  if (is_teacher != !o.teacher.empty()) {
    throw CheckpointError(CheckpointError::Kind::wrong_model,
                          path + " holds a " + (is_teacher ? "teacher" : "student") + " model");
  }
  json cfg = data_json(req);
  cfg["checkpoint"] = path;
  cfg["model"] = is_teacher ? "teacher" : "student";
  cfg["time_steps"] = o.time_steps;
  echo_config(out, "eval", cfg);
  const DataSplits data = load_splits(req);
  const EvalResult r = evaluate(ckpt, data.test, o.time_steps);
  json res{{"accuracy", r.accuracy}, {"samples", data.test.size()}};
  if (!is_teacher) res["fire_rate"] = r.fire_rate;
  echo_result(out, res);
  return 0;
}

std::pair<Index, Index> argmax_pixel(const TensorF& map) {
  Index best = 0;
  for (Index i = 1; i < map.numel(); ++i)
    if (map[i] > map[best]) best = i;
  return {best / map.dim(2), best % map.dim(2)};
}

int cmd_saliency(const Options& o, std::ostream& out) {
  if (o.teacher.empty() || o.student.empty()) throw UsageError("saliency needs --teacher and --student");
  if (o.out.empty()) throw UsageError("saliency needs --out");
  const DataRequest req = data_request(o);
  const SaliencyScaleMode mode{as_usage([&] { return parse_scale_kind(o.scale_mode); }), o.temp_map};
  const CamTarget target = as_usage([&] { return parse_cam_target(o.cam_target); });
  const SamReduce reduce = as_usage([&] { return parse_sam_reduce(o.sam_reduce); });
  if (o.samd_stage < 1 || o.samd_stage > kStages) throw UsageError("--samd-stage must be in [1, 4]");
  TeacherNet teacher = teacher_from_checkpoint(load_teacher_checkpoint(o.teacher));
  StudentNet student = load_student(o.student);
  json cfg = data_json(req);
  cfg.update({{"teacher", o.teacher}, {"student", o.student}, {"index", o.index}, {"time_steps", o.time_steps},
              {"samd_stage", o.samd_stage}, {"scale_mode", to_string(mode.kind)}, {"temp_map", mode.temperature},
              {"cam_target", to_string(target)}, {"sam_reduce", to_string(reduce)}, {"out", o.out}});
  echo_config(out, "saliency", cfg);

  const DataSplits data = load_splits(req);
  if (o.index < 0 || o.index >= data.test.size()) {
    throw std::out_of_range("--index " + std::to_string(o.index) + " outside the test split of " +
                            std::to_string(data.test.size()));
  }
  const Dataset sample = data.test.take({o.index});
  teacher.eval();
  teacher.set_requires_grad(false);
  student.eval();
  student.set_requires_grad(false);

  const TeacherView tv = teacher_view(teacher, sample.images, sample.labels, o.samd_stage, target, true);
  const auto so = student.forward(sample.images, o.time_steps);
  const SpikeTrain<float>& train = so.stage_spikes[o.samd_stage - 1];
  const auto sam = sam_generate(SpikeTrain<float>{train.spikes.detach(), train.time_steps});

  // d(class logit)/d(spikes): rerun the head on a leaf copy of the tapped spikes.
  TensorF leaf = train.spikes.detach();
  leaf.set_requires_grad(true);
  const TensorF logits = so.logits;
  TensorF grad = TensorF::zeros(leaf.shape());
  if (o.samd_stage == kStages) {
    const TensorF head_logits = student.head_from_spikes(leaf);
    backward(sum(pick(head_logits, sample.labels)));
    grad = TensorF(leaf.shape(), leaf.grad());
  }
  const auto gradcam = student_gradcam(SpikeTrain<float>{leaf.detach(), train.time_steps}, grad);

  const ActivationMap<float> cam{resize_bilinear(tv.cam.values, sam.height(), sam.width()), MapSource::teacher_cam};
  const std::filesystem::path dir = o.out;
  std::filesystem::create_directories(dir);
  const std::string tag = std::to_string(o.index);
  auto dump = [&](const std::string& name, const TensorF& m) {
    write_pgm(dir / (name + "_" + tag + ".pgm"), m.data().data(), m.dim(1), m.dim(2));
    write_map_csv(dir / (name + "_" + tag + ".csv"), m.data().data(), m.dim(1), m.dim(2));
  };
  dump("cam", cam.values);
  dump("sam", sam.values);
  dump("student_gradcam", gradcam.values);

  const double samd = samd_loss(cam, reduced_sam(SpikeTrain<float>{leaf.detach(), train.time_steps}, reduce), mode).item();
  const auto pc = argmax_pixel(cam.values), ps = argmax_pixel(sam.values), pg = argmax_pixel(gradcam.values);
  echo_result(out, {{"label", sample.labels[0]},
                    {"teacher_pred", argmax_rows(tv.logits)[0]},
                    {"student_pred", argmax_rows(logits)[0]},
                    {"samd", samd},
                    {"cam_argmax", {pc.first, pc.second}},
                    {"sam_argmax", {ps.first, ps.second}},
                    {"student_gradcam_argmax", {pg.first, pg.second}},
                    {"sam_gradcam_argmax_agree", ps == pg}});
  return 0;
}

int cmd_energy(const Options& o, std::ostream& out) {
  if (o.student.empty()) throw UsageError("energy needs --student");
  if (o.time_steps < 1) throw UsageError("--time-steps must be >= 1");
  const DataRequest req = data_request(o);
  StudentNet net = load_student(o.student);
  const EnergyConstants constants{o.e_ac, o.e_mac};
  json cfg = data_json(req);
  cfg.update({{"student", o.student}, {"time_steps", o.time_steps}, {"e_ac_pj", o.e_ac}, {"e_mac_pj", o.e_mac},
              {"out", o.out}});
  echo_config(out, "energy", cfg);
  const DataSplits data = load_splits(req);
  const EvalResult ev = evaluate_student(net, data.test, o.time_steps);
  const EnergyReport rep =
      make_energy_report(net.architecture(), data.test.height(), data.test.width(), ev.stage_counts, o.time_steps, constants);
  if (!o.out.empty()) {
    std::filesystem::create_directories(o.out);
    write_energy_csv(rep, std::filesystem::path(o.out) / "energy.csv");
  }
  write_energy_csv(rep, out);
  echo_result(out, {{"accuracy", ev.accuracy},
                    {"fire_rate", rep.fire_rate_percent},
                    {"sops", rep.sops},
                    {"energy_mj", rep.energy_mj},
                    {"e_ac_pj", constants.e_ac_pj},
                    {"e_mac_pj", constants.e_mac_pj}});
  return 0;
}

int cmd_ablate(const Options& o, const CLI::App& app, std::ostream& out, std::ostream& err) {
  train_config(o);
  const Checkpoint teacher = load_teacher_checkpoint(o.teacher);
  const TrainConfig c = distill_config(o, app, teacher);
  json cj = c.to_json();
  cj["teacher"] = o.teacher;
  cj["scale_modes"] = ablation_scale_modes();
  cj["noise_modes"] = ablation_noise_modes();
  echo_config(out, "ablate", cj);
  const DataSplits data = load_splits(c.data);
  const auto rows = ablation_suite(c, teacher, data, [&err](const AblationRow& r) {
    err << r.scale_mode << " / " << r.noise_mode << ": " << r.status << "  acc " << r.final_acc << std::endl;
  });
  if (!c.out_dir.empty()) {
    std::filesystem::create_directories(c.out_dir);
    write_ablation_csv(rows, c.out_dir / "ablation.csv");
  }
  write_ablation_csv(rows, out);
  return 0;
}

void apply_thread_env(Options& o) {
  const char* env = std::getenv("CKDSNN_THREADS");
  if (env != nullptr && *env != '\0') {
    int n = 0;
    try {
      n = std::stoi(env);
    } catch (const std::exception&) {
      throw UsageError(std::string("CKDSNN_THREADS must be a positive integer, got '") + env + "'");
    }
    if (n < 1) throw UsageError("CKDSNN_THREADS must be a positive integer");
    Eigen::setNbThreads(n);
    if (n == 1) o.deterministic = true;
  }
  if (o.deterministic) Eigen::setNbThreads(1);
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Distils a convolutional teacher into a spiking student.", "ckdsnn"};
  app.require_subcommand(1);
  Options o;

  auto* teach = app.add_subcommand("train-teacher", "train the ANN teacher with cross-entropy");
  add_train_options(*teach, o);

  auto* distill = app.add_subcommand("distill", "train a spiking student against a frozen teacher");
  add_train_options(*distill, o);
  distill->add_option("--teacher", o.teacher, "teacher checkpoint")->required();

  auto* eval = app.add_subcommand("eval", "top-1 accuracy (and fire rate for students) on the test split");
  add_data_options(*eval, o);
  add_run_options(*eval, o);
  eval->add_option("--teacher", o.teacher, "teacher checkpoint");
  eval->add_option("--student", o.student, "student checkpoint");

  auto* sal = app.add_subcommand("saliency", "export the teacher CAM and student SAM of one test sample");
  add_data_options(*sal, o);
  add_run_options(*sal, o);
  sal->add_option("--teacher", o.teacher, "teacher checkpoint")->required();
  sal->add_option("--student", o.student, "student checkpoint")->required();
  sal->add_option("--index", o.index, "test-split sample index")->capture_default_str();
  sal->add_option("--samd-stage", o.samd_stage)->capture_default_str();
  sal->add_option("--scale-mode", o.scale_mode)->capture_default_str();
  sal->add_option("--temp-map", o.temp_map)->capture_default_str();
  sal->add_option("--cam-target", o.cam_target)->capture_default_str();
  sal->add_option("--sam-reduce", o.sam_reduce)->capture_default_str();
  sal->add_option("--out", o.out, "output directory")->required();

  auto* energy = app.add_subcommand("energy", "fire rate, SOPs and energy estimate of a student");
  add_data_options(*energy, o);
  add_run_options(*energy, o);
  energy->add_option("--student", o.student, "student checkpoint")->required();
  energy->add_option("--e-ac", o.e_ac, "pJ per accumulate")->capture_default_str();
  energy->add_option("--e-mac", o.e_mac, "pJ per multiply-accumulate")->capture_default_str();
  energy->add_option("--out", o.out, "output directory");

  auto* ablate = app.add_subcommand("ablate", "scale-mode x noise-mode grid of distillation runs");
  add_train_options(*ablate, o);
  ablate->add_option("--teacher", o.teacher, "teacher checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n" << "run with --help for usage\n";
    return 2;
  }

  try {
    apply_thread_env(o);
    if (teach->parsed()) return cmd_train_teacher(o, out, err);
    if (distill->parsed()) return cmd_distill(o, *distill, out, err);
    if (eval->parsed()) return cmd_eval(o, out);
    if (sal->parsed()) return cmd_saliency(o, out);
    if (energy->parsed()) return cmd_energy(o, out);
    if (ablate->parsed()) return cmd_ablate(o, *ablate, out, err);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace ckdsnn
