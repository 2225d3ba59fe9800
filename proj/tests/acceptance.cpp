// Prints one PASS/FAIL line per acceptance criterion. Tolerances are fixed here.
//   acceptance [--work-dir DIR] [--only N]...
#include "ckdsnn/cli.hpp"
#include "ckdsnn/train.hpp"
#include "support/gradcheck.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

using namespace ckdsnn;
using ckdsnn::testing::gradcheck;
using ckdsnn::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;
};

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int cli(std::vector<std::string> args, std::string* captured = nullptr) {
  args.insert(args.begin(), "ckdsnn");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  if (captured) *captured = out.str();
  if (code != 0) std::cerr << err.str();
  return code;
}

// --- 1 ---------------------------------------------------------------------

Outcome gradients() {
  constexpr double kTol = 1e-3;
  constexpr int kTrials = 10;
  const auto t0 = Clock::now();
  std::map<std::string, double> worst;
  Rng rng(2718);
  auto record = [&](const std::string& op, const testing::GradCheck& g) {
    worst[op] = std::max(worst[op], g.rel_error);
  };
  for (int trial = 0; trial < kTrials; ++trial) {
    {  // conv2d: input and kernel each <= 64 elements
      const Index c = rng.uniform_int(1, 2), o = rng.uniform_int(1, 3), h = rng.uniform_int(3, 5);
      const Index stride = rng.uniform_int(1, 2), pad = rng.uniform_int(0, 1);
      const TensorD x = random_tensor(rng, {1, c, h, h}), k = random_tensor(rng, {o, c, 3, 3});
      const TensorD probe = random_tensor(rng, conv2d(x, k, stride, pad).shape());
      record("conv2d", gradcheck([&](const auto& in) { return sum(mul(conv2d(in[0], in[1], stride, pad), probe)); },
                                 {x, k}));
    }
    {
      const Index m = rng.uniform_int(1, 8), k = rng.uniform_int(1, 8), n = rng.uniform_int(1, 8);
      const TensorD a = random_tensor(rng, {m, k}), b = random_tensor(rng, {k, n}), w = random_tensor(rng, {m, n});
      record("matmul", gradcheck([&](const auto& in) { return sum(mul(matmul(in[0], in[1]), w)); }, {a, b}));
    }
    {
      const Index n = rng.uniform_int(2, 4), c = rng.uniform_int(1, 3), h = rng.uniform_int(1, 2);
      const TensorD x = random_tensor(rng, {n, c, h, h}), w = random_tensor(rng, {c}, 0.5, 1.5);
      const TensorD b = random_tensor(rng, {c}), probe = random_tensor(rng, x.shape());
      record("batchnorm", gradcheck(
                              [&](const auto& in) {
                                Vector<double> rm = Vector<double>::Zero(c), rv = Vector<double>::Ones(c);
                                return sum(mul(batch_norm2d(in[0], in[1], in[2], rm, rv), probe));
                              },
                              {x, w, b}));
    }
    const Index n = rng.uniform_int(1, 6), k = rng.uniform_int(2, 10);
    const TensorD a = random_tensor(rng, {n, k}, -2, 2), b = random_tensor(rng, {n, k}, -2, 2);
    const TensorD probe = random_tensor(rng, {n, k});
    const double t = rng.uniform(0.5, 3.0);
    record("softmax", gradcheck([&](const auto& in) { return sum(mul(softmax(in[0], 1, t), probe)); }, {a}));
    record("kl_div", gradcheck(
                         [&](const auto& in) {
                           return kl_div(softmax(in[0], 1, 1.0), softmax(in[1], 1, 1.0), Reduction::batch_mean);
                         },
                         {a, b}));
    std::vector<int> labels;
    for (Index i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng.uniform_int(0, k - 1)));
    record("cross_entropy", gradcheck([&](const auto& in) { return cross_entropy(in[0], labels); }, {a}));
    {  // NLD with the noise drawn once and frozen
      const TensorD eps = sample_adaptive_noise(b, rng);
      record("nld", gradcheck([&](const auto& in) { return nld_loss(a, smooth_logits(in[0], eps, 0.1), 2.0); }, {b}));
    }
    {
      const Index bn = rng.uniform_int(1, 2), h = rng.uniform_int(1, 4), w = rng.uniform_int(2, 4);
      const ActivationMap<double> te{random_tensor(rng, {bn, h, w}, 0, 3), MapSource::teacher_cam};
      const TensorD st = random_tensor(rng, {bn, h, w}, 0, 3);
      record("samd", gradcheck(
                         [&](const auto& in) {
                           return samd_loss(te, ActivationMap<double>{in[0], MapSource::student_sam}, 2.0);
                         },
                         {st}));
    }
  }
  const double secs = since(t0);
  Outcome o;
  for (const auto& [op, e] : worst) {
    if (!(e < kTol)) o.pass = false;
    o.detail += op + "=" + fmt(e, 2) + " ";
  }
  o.pass = o.pass && secs < 60;
  o.detail += "(" + fmt(secs, 3) + " s)";
  return o;
}

// --- 2 ---------------------------------------------------------------------

Outcome neuron_oracle() {
  Outcome o;
  const NeuronParams p;
  const auto pattern = spiking_forward(TensorF(Shape{5, 1}, {0.4f, 0.4f, 0.4f, 0.4f, 0.4f}), p);
  const std::vector<float> want{0, 0, 1, 0, 0};
  for (Index t = 0; t < 5; ++t) o.pass = o.pass && pattern.spikes[t] == want[static_cast<std::size_t>(t)];

  Rng rng(1);
  int mismatched = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Index t = rng.uniform_int(1, 8), c = rng.uniform_int(1, 4), h = rng.uniform_int(1, 4), w = rng.uniform_int(1, 4);
    NeuronParams q;
    q.v_threshold = rng.uniform(0.5, 1.5);
    q.v_reset = rng.uniform(-0.5, 0.2);
    const Index n = c * h * w;
    Vector<float> cur(t * n);
    for (Index i = 0; i < cur.size(); ++i) cur[i] = static_cast<float>(rng.uniform(-0.5, 1.5));
    const auto got = spiking_forward(TensorF(Shape{t, c, h, w}, cur), q);
    bool same = true;
    for (Index i = 0; i < n; ++i) {
      float v = static_cast<float>(q.v_reset);
      for (Index s = 0; s < t; ++s) {
        const float hm = v + cur[s * n + i];
        const float spike = hm >= static_cast<float>(q.v_threshold) ? 1.0f : 0.0f;
        v = hm * (1.0f - spike) + static_cast<float>(q.v_reset) * spike;
        same = same && got.spikes[s * n + i] == spike;
      }
    }
    mismatched += same ? 0 : 1;
  }
  o.pass = o.pass && mismatched == 0;
  o.detail = "pattern " + std::string(o.pass ? "[0,0,1,0,0]" : "wrong") + ", " + std::to_string(mismatched) +
             "/100 random cases differ";
  return o;
}

// --- 3 ---------------------------------------------------------------------

Outcome saliency_oracles() {
  Rng rng(3);
  int count_errors = 0;
  double worst_sum = 0, worst_identical = 0, worst_shift = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const Index t = rng.uniform_int(1, 6), n = rng.uniform_int(1, 3), c = rng.uniform_int(1, 5);
    const Index h = rng.uniform_int(1, 5), w = rng.uniform_int(2, 5);
    Vector<float> v(t * n * c * h * w);
    for (Index i = 0; i < v.size(); ++i) v[i] = rng.coin(0.3) ? 1.0f : 0.0f;
    const SpikeTrain<float> train{TensorF(Shape{t, n, c, h, w}, v), t};
    const auto sam = sam_generate(train);
    for (Index b = 0; b < n; ++b)
      for (Index px = 0; px < h * w; ++px) {
        int k = 0;
        for (Index s = 0; s < t; ++s)
          for (Index ch = 0; ch < c; ++ch) k += v[((s * n + b) * c + ch) * h * w + px] != 0.0f;
        count_errors += sam.values[b * h * w + px] != static_cast<float>(k);
      }
    const ActivationMap<double> raw{random_tensor(rng, {n, h, w}, 0, 10), MapSource::teacher_cam};
    const ActivationMap<double> other{random_tensor(rng, {n, h, w}, 0, 10), MapSource::student_sam};
    const auto scaled = saliency_scale(raw, {ScaleKind::softmax, 2.0});
    for (Index b = 0; b < n; ++b) {
      worst_sum = std::max(worst_sum, std::abs(scaled.probs.data().segment(b * h * w, h * w).sum() - 1.0));
    }
    worst_identical = std::max(worst_identical, std::abs(samd_loss(raw, raw, 2.0).item()));
    const double base = samd_loss(raw, other, 2.0).item();
    const double shift = rng.uniform(-20, 20);
    const double moved = samd_loss(ActivationMap<double>{add_scalar(raw.values, shift), raw.source},
                                   ActivationMap<double>{add_scalar(other.values, -shift), other.source}, 2.0)
                             .item();
    worst_shift = std::max(worst_shift, std::abs(base - moved));
  }
  Outcome o;
  o.pass = count_errors == 0 && worst_sum <= 1e-6 && worst_identical < 1e-7 && worst_shift <= 1e-6;
  o.detail = "count mismatches " + std::to_string(count_errors) + ", |sum-1| " + fmt(worst_sum, 2) +
             ", identical " + fmt(worst_identical, 2) + ", shift " + fmt(worst_shift, 2);
  return o;
}

// --- 4 ---------------------------------------------------------------------

Outcome nld_statistics() {
  const Index draws = 100000;
  Rng rng(4);
  Vector<double> zv(draws);
  for (Index i = 0; i < draws / 2; ++i) {
    zv[2 * i] = 0.0;
    zv[2 * i + 1] = 2.0;
  }
  const auto eps = sample_adaptive_noise(TensorD(Shape{draws / 2, 2}, zv), rng);
  const double mean = eps.data().mean();
  const double sd = std::sqrt((eps.data().array() - mean).square().mean());
  const bool moments = std::abs(mean - 1.0) <= 3.0 / std::sqrt(static_cast<double>(draws)) && std::abs(sd - 1.0) <= 0.02;

  bool bitwise = true;
  for (int trial = 0; trial < 50; ++trial) {
    const Index n = rng.uniform_int(1, 8), k = rng.uniform_int(2, 10);
    const TensorF te = random_tensor(rng, {n, k}, -4, 4).cast<float>(), st = random_tensor(rng, {n, k}, -4, 4).cast<float>();
    const TensorF noise = sample_adaptive_noise(st, rng);
    const float tau = static_cast<float>(rng.uniform(0.5, 4.0));
    const float kd = scale(kl_div(softmax(te, 1, tau), softmax(st, 1, tau), Reduction::batch_mean), tau * tau).item();
    bitwise = bitwise && nld_loss(te, smooth_logits(st, noise, 0.0), tau).item() == kd;
  }
  return {moments && bitwise, "mean " + fmt(mean, 6) + ", std " + fmt(sd, 6) + ", lambda=0 bitwise " +
                                  (bitwise ? "yes" : "no")};
}

// --- 5 ---------------------------------------------------------------------

struct Experiment {
  // synth_shapes(4000)/1000 at 16x16; stage-4 maps are 4x4 with these strides
  static constexpr Index kTrain = 4000, kTest = 1000, kSize = 16;
  static constexpr std::array<Index, kStages> kStrides{1, 2, 2, 1};
  static constexpr std::array<Index, kStages> kTeacherChannels{32, 64, 128, 128};
  static constexpr std::array<Index, kStages> kStudentChannels{8, 16, 32, 32};
  static constexpr int kTeacherEpochs = 20, kStudentEpochs = 20;
  static constexpr Index kTimeSteps = 4;
  static constexpr double kMargin = 0.5, kSlack = 0.25, kTeacherFloor = 95.0, kBudgetSeconds = 90 * 60;
};

Outcome directional(const fs::path& work) {
  using E = Experiment;
  const auto t0 = Clock::now();
  TrainConfig base;
  base.data.train_size = E::kTrain;
  base.data.test_size = E::kTest;
  base.data.synth_image_size = E::kSize;
  base.strides = E::kStrides;
  base.time_steps = E::kTimeSteps;
  base.deterministic = true;
  const DataSplits data = load_splits(base.data);

  TrainConfig tc = base;
  tc.epochs = E::kTeacherEpochs;
  tc.channels = E::kTeacherChannels;
  tc.augment = true;
  tc.out_dir = work / "c5_teacher";
  const RunResult teacher = train_teacher(tc, data);
  std::cerr << "[5] teacher final " << teacher.final_accuracy << " (" << fmt(since(t0)) << " s)\n";

  struct Arm {
    const char* name;
    double beta, gamma;
    std::vector<double> acc;
  };
  std::vector<Arm> arms{{"ce", 0, 0, {}}, {"ckd", 1, 1, {}}, {"samd", 1, 0, {}}, {"nld", 0, 1, {}}};
  std::ofstream table(work / "c5_runs.csv");
  table << "arm,seed,final_acc,best_acc,fire_rate\n";
  for (std::uint64_t seed : {1, 2, 3}) {
    for (auto& arm : arms) {
      TrainConfig sc = base;
      sc.epochs = E::kStudentEpochs;
      sc.channels = E::kStudentChannels;
      sc.seed = seed;
      sc.weights.beta = arm.beta;
      sc.weights.gamma = arm.gamma;
      const RunResult r = distill_student(sc, &teacher.last, data);
      arm.acc.push_back(r.final_accuracy);
      table << arm.name << ',' << seed << ',' << r.final_accuracy << ',' << r.best_accuracy << ',' << r.final_fire_rate
            << '\n';
      std::cerr << "[5] " << arm.name << " seed " << seed << " final " << r.final_accuracy << " fire "
                << fmt(r.final_fire_rate) << "% (" << fmt(since(t0)) << " s)\n";
    }
  }
  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
  const double ce = mean(arms[0].acc), ckd = mean(arms[1].acc), samd = mean(arms[2].acc), nld = mean(arms[3].acc);
  const double secs = since(t0);
  Outcome o;
  o.pass = teacher.final_accuracy >= E::kTeacherFloor && ckd - ce >= E::kMargin && samd >= ce - E::kSlack &&
           nld >= ce - E::kSlack && secs < E::kBudgetSeconds;
  o.detail = "teacher " + fmt(teacher.final_accuracy) + ", mean acc ce " + fmt(ce) + " ckd " + fmt(ckd) +
             " samd-only " + fmt(samd) + " nld-only " + fmt(nld) + " (ckd-ce " + fmt(ckd - ce, 3) + "), " +
             fmt(secs / 60, 3) + " min";
  return o;
}

// --- 6 ---------------------------------------------------------------------

const std::vector<std::string> kTiny{"--train-size", "64", "--test-size", "32", "--image-size", "8", "--strides",
                                     "1,2,2,1", "--arch", "4,8,8,8", "--batch-size", "32", "--time-steps", "2",
                                     "--deterministic"};

std::vector<std::string> tiny(std::vector<std::string> head) {
  head.insert(head.end(), kTiny.begin(), kTiny.end());
  return head;
}

fs::path tiny_teacher(const fs::path& work) {
  const fs::path dir = work / "tiny_teacher";
  if (!fs::exists(dir / "last.ckpt")) cli(tiny({"train-teacher", "--epochs", "3", "--out", dir.string()}));
  return dir / "last.ckpt";
}

Outcome ablation(const fs::path& work) {
  const fs::path teacher = tiny_teacher(work);
  std::string tables[2];
  for (int run = 0; run < 2; ++run) {
    const fs::path dir = work / ("ablate_" + std::to_string(run));
    if (cli(tiny({"ablate", "--teacher", teacher.string(), "--epochs", "1", "--out", dir.string()})) != 0) {
      return {false, "ablate exited non-zero"};
    }
    tables[run] = slurp(dir / "ablation.csv");
  }
  std::istringstream in(tables[0]);
  std::string line;
  std::getline(in, line);
  int rows = 0, ok = 0;
  while (std::getline(in, line)) {
    ++rows;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    bool finite = cells.size() == 10 && cells[2] == "ok";
    for (std::size_t i = 3; finite && i < cells.size(); ++i) finite = std::isfinite(std::stod(cells[i]));
    ok += finite ? 1 : 0;
  }
  const bool same = !tables[0].empty() && tables[0] == tables[1];
  const int want = static_cast<int>(ablation_scale_modes().size() * ablation_noise_modes().size());
  return {rows == want && ok == want && same, std::to_string(ok) + "/" + std::to_string(want) +
                                                  " finite rows, rerun " + (same ? "bitwise identical" : "differs")};
}

// --- 7 ---------------------------------------------------------------------

Outcome energy(const fs::path& work) {
  // 6 of 32 entries fire into a 120-MAC layer; 1 of 4 into a 40-MAC layer; T = 4
  Vector<float> v = Vector<float>::Zero(32);
  v.head(6).setOnes();
  const double rate = fire_rate(SpikeTrain<float>{TensorF(Shape{1, 32}, v), 1});
  const std::vector<LayerProfile> layers{{"conv", 120, 6.0 / 32, false}, {"fc", 40, 0.25, false}};
  const double sops = count_sops(layers, 4);
  const double mj = estimate_energy_mj(1e9, 0, 4);
  const bool hand = rate == 18.75 && sops == 130.0 && mj == 0.9;

  const fs::path teacher = tiny_teacher(work);
  const fs::path student = work / "energy_student";
  std::string out;
  bool reported = cli(tiny({"distill", "--teacher", teacher.string(), "--epochs", "1", "--out", student.string()})) == 0 &&
                  cli({"eval", "--student", (student / "last.ckpt").string(), "--train-size", "64", "--test-size", "32",
                       "--image-size", "8", "--time-steps", "2"},
                      &out) == 0;
  reported = reported && out.find("\"accuracy\"") != std::string::npos && out.find("\"fire_rate\"") != std::string::npos;
  return {hand && reported, "fire rate " + fmt(rate) + "%, SOPs " + fmt(sops) + ", 1e9 SOPs -> " + fmt(mj) +
                                " mJ, eval reports fire rate: " + (reported ? "yes" : "no")};
}

// --- 8 ---------------------------------------------------------------------

Outcome determinism(const fs::path& work) {
  const fs::path teacher = tiny_teacher(work);
  const std::string before = slurp(teacher);
  for (const char* run : {"det_a", "det_b"}) {
    if (cli(tiny({"distill", "--teacher", teacher.string(), "--epochs", "2", "--out", (work / run).string()})) != 0) {
      return {false, "distill exited non-zero"};
    }
  }
  bool same = true;
  for (const char* f : {"last.ckpt", "best.ckpt", "metrics.csv"}) {
    same = same && slurp(work / "det_a" / f) == slurp(work / "det_b" / f) && !slurp(work / "det_a" / f).empty();
  }
  const bool untouched = slurp(teacher) == before;

  // in-process: teacher tensors before and after a distillation run
  const Checkpoint t = load_checkpoint(teacher);
  const Checkpoint copy = t;
  TrainConfig c;
  c.epochs = 1;
  c.batch_size = 32;
  c.time_steps = 2;
  c.channels = {4, 8, 8, 8};
  c.strides = {1, 2, 2, 1};
  c.deterministic = true;
  const DataSplits data{synth_shapes(64, 4, 8, 0, SynthOptions::hard()), synth_shapes(32, 4, 8, 1, SynthOptions::hard())};
  distill_student(c, &t, data);
  bool params_same = true;
  for (const auto& [name, tensor] : copy.tensors) params_same = params_same && t.tensors.at(name).data() == tensor.data();
  return {same && untouched && params_same, std::string("checkpoints+metrics ") + (same ? "identical" : "differ") +
                                                ", teacher " + (untouched && params_same ? "unchanged" : "modified")};
}

// --- 9 ---------------------------------------------------------------------

template <typename Fn>
std::string error_kind(Fn&& fn) {
  try {
    fn();
  } catch (const DataError& e) {
    static const char* names[] = {"io", "bad_magic", "truncated", "count_mismatch", "label_out_of_range", "bad_size",
                                  "bad_dimensions"};
    return std::string("data:") + names[static_cast<int>(e.kind())];
  } catch (const CheckpointError& e) {
    static const char* names[] = {"io", "bad_magic", "bad_version", "corrupt", "shape_mismatch", "missing_tensor",
                                  "wrong_model"};
    return std::string("ckpt:") + names[static_cast<int>(e.kind())];
  } catch (const std::exception&) {
    return "other";
  }
  return "none";
}

Outcome round_trips(const fs::path& work) {
  const fs::path dir = work / "formats";
  fs::create_directories(dir);
  bool ok = true;

  Rng rng(9);
  StudentNet net({1, 4, {4, 8, 8, 8}, {1, 2, 2, 1}}, NeuronParams{}, rng);
  save_checkpoint(net, dir / "s.ckpt");
  const auto back = load_student(dir / "s.ckpt");
  for (const auto& [name, t] : net.state()) ok = ok && back.state().at(name).data() == t.data();
  save_checkpoint(back, dir / "s2.ckpt");
  ok = ok && slurp(dir / "s.ckpt") == slurp(dir / "s2.ckpt");

  const Dataset mnist = synth_shapes(12, 4, 8, 1);
  write_mnist_idx(mnist, dir / "img", dir / "lab");
  const Dataset m2 = load_mnist_idx(dir / "img", dir / "lab");
  for (Index i = 0; i < mnist.images.numel(); ++i) {
    ok = ok && std::lround(mnist.images[i] * 255.0f) == std::lround(m2.images[i] * 255.0f);
  }
  ok = ok && m2.labels == mnist.labels;
  write_mnist_idx(m2, dir / "img2", dir / "lab2");
  ok = ok && slurp(dir / "img") == slurp(dir / "img2") && slurp(dir / "lab") == slurp(dir / "lab2");

  std::string cifar;
  for (int r = 0; r < 3; ++r) {
    cifar.push_back(static_cast<char>(r * 3));
    for (int p = 0; p < 3072; ++p) cifar.push_back(static_cast<char>((p * 31 + r) & 0xff));
  }
  std::ofstream(dir / "c.bin", std::ios::binary) << cifar;
  const Dataset c = load_cifar10_file(dir / "c.bin");
  write_cifar10_bin(c, dir / "c2.bin");
  ok = ok && slurp(dir / "c2.bin") == cifar && c.labels == std::vector<int>{0, 3, 6};

  // malformed inputs, each with its own error kind
  std::ofstream(dir / "short.bin", std::ios::binary) << cifar.substr(0, 100);
  std::string bad_label = cifar.substr(0, 3073);
  bad_label[0] = static_cast<char>(255);
  std::ofstream(dir / "label.bin", std::ios::binary) << bad_label;
  std::string bad_magic = slurp(dir / "img");
  bad_magic[3] = 0x09;
  std::ofstream(dir / "magic", std::ios::binary) << bad_magic;
  write_mnist_idx(mnist.head(8), dir / "img_short", dir / "lab_short");
  const std::string img = slurp(dir / "img");
  std::ofstream(dir / "img_cut", std::ios::binary) << img.substr(0, img.size() - 10);
  std::string cut = slurp(dir / "s.ckpt");
  std::ofstream(dir / "cut.ckpt", std::ios::binary) << cut.substr(0, cut.size() - 5);
  std::ofstream(dir / "foreign.ckpt", std::ios::binary) << "GIF89a not a checkpoint";
  const std::vector<std::string> kinds{
      error_kind([&] { load_cifar10_file(dir / "short.bin"); }),
      error_kind([&] { load_cifar10_file(dir / "label.bin"); }),
      error_kind([&] { load_mnist_idx(dir / "magic", dir / "lab"); }),
      error_kind([&] { load_mnist_idx(dir / "img", dir / "lab_short"); }),
      error_kind([&] { load_mnist_idx(dir / "img_cut", dir / "lab"); }),
      error_kind([&] { load_checkpoint(dir / "cut.ckpt"); }),
      error_kind([&] { load_checkpoint(dir / "foreign.ckpt"); }),
  };
  const std::set<std::string> distinct(kinds.begin(), kinds.end());
  const bool rejected = distinct.size() == kinds.size() && !distinct.count("none") && !distinct.count("other");
  std::string listed;
  for (const auto& k : kinds) listed += k + " ";
  return {ok && rejected, std::string("round trips ") + (ok ? "exact" : "differ") + ", malformed -> " + listed};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string work = (fs::temp_directory_path() / "ckdsnn_acceptance").string();
  std::vector<int> only;
  app.add_option("--work-dir", work, "scratch directory");
  app.add_option("--only", only, "run only these criteria");
  CLI11_PARSE(app, argc, argv);
  fs::remove_all(work);
  fs::create_directories(work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradients},
      {"neuron oracle", neuron_oracle},
      {"saliency oracles", saliency_oracles},
      {"NLD statistics", nld_statistics},
      {"directional distillation", [&] { return directional(work); }},
      {"ablation harness", [&] { return ablation(work); }},
      {"energy accounting", [&] { return energy(work); }},
      {"determinism and isolation", [&] { return determinism(work); }},
      {"format round-trips", [&] { return round_trips(work); }},
  };
  // the long experiment runs last
  const std::vector<int> order{1, 2, 3, 4, 6, 7, 8, 9, 5};
  int failed = 0;
  for (int id : order) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto& [name, run] = criteria[static_cast<std::size_t>(id - 1)];
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << name << ": " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
