// Acceptance checks. One PASS/FAIL line per criterion on stdout, progress on
// stderr. Exit status is nonzero when any criterion fails.
//
//   acceptance [--work DIR] [--seeds N] [--teacher-epochs N] [--student-epochs N]
//              [--only 1,2,...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "kdlab/checkpoint.hpp"
#include "kdlab/cli.hpp"
#include "kdlab/data.hpp"
#include "kdlab/distill.hpp"
#include "kdlab/metrics.hpp"
#include "kdlab/models.hpp"
#include "kdlab/ops.hpp"
#include "../unit/test_util.hpp"

using namespace kdlab;
using kdlab::testing::away_from_zero;
using kdlab::testing::model_grad_check;
using kdlab::testing::projected;
using kdlab::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Options {
  fs::path work = "acceptance_runs";
  int seeds = 5;
  int teacher_epochs = -1;  // -1: preset default
  int student_epochs = -1;
  std::set<int> only;
};

int failures = 0;

void report(int id, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::cout << (pass ? "PASS" : "FAIL") << " criterion " << id << ": " << detail << std::endl;
}

std::string fmt(double v, int prec = 6) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

// ---------------------------------------------------------------- 1

LinearParams rand_linear(std::size_t in, std::size_t out, std::uint64_t seed) {
  return {random_tensor({in, out}, seed, -0.5, 0.5), random_tensor({out}, seed + 1, -0.2, 0.2)};
}

LayerNormParams rand_ln(std::size_t d, std::uint64_t seed) {
  return {random_tensor({d}, seed, 0.5, 1.5), random_tensor({d}, seed + 1, -0.2, 0.2)};
}

void criterion_gradients() {
  const auto t0 = Clock::now();
  std::map<std::string, double> err;
  auto note = [&](const std::string& name, double e) { err[name] = std::max(err[name], e); };

  {
    Tensor a = random_tensor({3, 4}, 1), b = random_tensor({4, 5}, 2);
    note("matmul", grad_check(projected([&](const Tensor& x) { return matmul(x, b); }, {3, 5}, 3), a));
    note("matmul", grad_check(projected([&](const Tensor& x) { return matmul(a, x); }, {3, 5}, 4), b));
  }
  {
    Tensor x = random_tensor({2, 2, 5, 5}, 5), w = random_tensor({3, 2, 3, 3}, 6),
           bias = random_tensor({3}, 7);
    for (std::size_t stride : {1u, 2u}) {
      const std::size_t o = (5 + 2 - 3) / stride + 1;
      const Shape os{2, 3, o, o};
      note("conv2d", grad_check(projected([&](const Tensor& v) { return conv2d(v, w, bias, stride, 1); }, os, 8), x));
      note("conv2d", grad_check(projected([&](const Tensor& v) { return conv2d(x, v, bias, stride, 1); }, os, 9), w));
      note("conv2d", grad_check(projected([&](const Tensor& v) { return conv2d(x, w, v, stride, 1); }, os, 10), bias));
    }
  }
  {
    Tensor x = away_from_zero({4, 6}, 11);
    note("relu", grad_check(projected([](const Tensor& v) { return relu(v); }, {4, 6}, 12), x));
    note("gelu", grad_check(projected([](const Tensor& v) { return gelu(v); }, {4, 6}, 13), random_tensor({4, 6}, 14, -3, 3)));
  }
  {
    Tensor x = random_tensor({3, 2, 3, 3}, 15), g = random_tensor({2}, 16, 0.5, 1.5),
           b = random_tensor({2}, 17);
    const Shape s{3, 2, 3, 3};
    auto bn = [&](const Tensor& xv, const Tensor& gv, const Tensor& bv) {
      BatchNormStats stats = BatchNormStats::fresh(2);
      return batchnorm2d(xv, gv, bv, stats, Mode::train);
    };
    note("batchnorm2d", grad_check(projected([&](const Tensor& v) { return bn(v, g, b); }, s, 18), x));
    note("batchnorm2d", grad_check(projected([&](const Tensor& v) { return bn(x, v, b); }, s, 19), g));
    note("batchnorm2d", grad_check(projected([&](const Tensor& v) { return bn(x, g, v); }, s, 20), b));
  }
  {
    Tensor x = random_tensor({2, 3, 5}, 21), g = random_tensor({5}, 22, 0.5, 1.5), b = random_tensor({5}, 23);
    const Shape s{2, 3, 5};
    note("layernorm", grad_check(projected([&](const Tensor& v) { return layernorm(v, g, b); }, s, 24), x));
    note("layernorm", grad_check(projected([&](const Tensor& v) { return layernorm(x, v, b); }, s, 25), g));
    note("layernorm", grad_check(projected([&](const Tensor& v) { return layernorm(x, g, v); }, s, 26), b));
  }
  for (double t : {1.0, 3.0, 11.0}) {
    Tensor z = random_tensor({4, 6}, 27, -4, 4);
    note("softmax_t", grad_check(projected([t](const Tensor& v) { return softmax_t(v, t); }, {4, 6}, 28), z));
  }
  {
    const std::size_t d = 8;
    AttentionParams p{rand_linear(d, 3 * d, 30), rand_linear(d, d, 32), 2};
    Tensor x = random_tensor({2, 4, d}, 34);
    const Shape s{2, 4, d};
    note("mhsa", grad_check(projected([&](const Tensor& v) { return mhsa(v, p); }, s, 35), x));
    note("mhsa", grad_check(projected([&](const Tensor& v) {
                              AttentionParams q = p;
                              q.qkv.weight = v;
                              return mhsa(x, q);
                            }, s, 36), p.qkv.weight));
    note("mhsa", grad_check(projected([&](const Tensor& v) {
                              AttentionParams q = p;
                              q.proj.weight = v;
                              return mhsa(x, q);
                            }, s, 37), p.proj.weight));
  }
  for (Activation act : {Activation::gelu, Activation::relu}) {
    const std::size_t d = 8;
    BlockParams bp{rand_ln(d, 40), {rand_linear(d, 3 * d, 42), rand_linear(d, d, 44), 2}, rand_ln(d, 46),
                   rand_linear(d, 16, 48), rand_linear(16, d, 50), act};
    Tensor x = random_tensor({2, 3, d}, 52);
    const Shape s{2, 3, d};
    note("transformer_block", grad_check(projected([&](const Tensor& v) { return transformer_block(v, bp); }, s, 53), x));
    note("transformer_block", grad_check(projected([&](const Tensor& v) {
                                           BlockParams q = bp;
                                           q.fc1.weight = v;
                                           return transformer_block(x, q);
                                         }, s, 54), bp.fc1.weight));
    note("transformer_block", grad_check(projected([&](const Tensor& v) {
                                           BlockParams q = bp;
                                           q.attn.qkv.weight = v;
                                           return transformer_block(x, q);
                                         }, s, 55), bp.attn.qkv.weight));
  }
  for (const auto& preset : preset_names()) {
    auto m = make_model(preset, {1, 8, 3}, 60);
    note("model:" + preset, model_grad_check(*m, random_tensor({3, 1, 8, 8}, 61, 0, 1), 62));
  }

  const double elapsed = seconds_since(t0);
  double worst = 0.0;
  std::string worst_name;
  std::ostringstream detail;
  for (const auto& [name, e] : err) {
    std::cerr << "  grad_check " << name << " max rel err " << e << "\n";
    if (e >= worst) {
      worst = e;
      worst_name = name;
    }
  }
  detail << err.size() << " ops, worst " << worst_name << " " << fmt(worst, 3) << " (< 1e-4), "
         << fmt(elapsed, 3) << " s (< 60 s)";
  report(1, worst < 1e-4 && elapsed < 60.0, detail.str());
}

// ---------------------------------------------------------------- 2, 3

Tensor random_stochastic(std::size_t n, std::size_t c, Rng& rng, double spread) {
  std::vector<double> v(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += v[i * c + j] = std::exp(rng.uniform(-spread, spread));
    for (std::size_t j = 0; j < c; ++j) v[i * c + j] /= z;
  }
  return Tensor({n, c}, std::move(v));
}

double kd_reference(const Tensor& t, const Tensor& s) {
  const std::size_t n = t.dim(0), c = t.dim(1);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double tij = t[i * c + j];
      if (tij == 0.0) continue;
      acc += tij * std::log(std::max(s[i * c + j], 1e-12));
    }
  return -acc / static_cast<double>(n);
}

double task_reference(const std::vector<std::size_t>& y, const Tensor& z) {
  const std::size_t n = z.dim(0), c = z.dim(1);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double m = z[i * c];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, z[i * c + j]);
    double se = 0.0;
    for (std::size_t j = 0; j < c; ++j) se += std::exp(z[i * c + j] - m);
    acc += z[i * c + y[i]] - m - std::log(se);
  }
  return -acc / static_cast<double>(n);
}

void criterion_losses() {
  Rng rng(2024);
  double kd_err = 0.0, task_err = 0.0, total_err = 0.0;
  bool alpha_one_exact = true;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(16), c = 2 + rng.below(12);
    Tensor t = random_stochastic(n, c, rng, 3.0), s = random_stochastic(n, c, rng, 3.0);
    const double kd = kd_loss(t, s).item();
    kd_err = std::max(kd_err, std::abs(kd - kd_reference(t, s)));

    Tensor z = random_tensor({n, c}, rng.next_u64(), -20, 20);
    std::vector<std::size_t> y(n);
    for (auto& v : y) v = rng.below(c);
    const double task = task_loss(y, z).item();
    task_err = std::max(task_err, std::abs(task - task_reference(y, z)));

    const double alpha = rng.uniform(), temp = rng.uniform(0.5, 20);
    const double want = (1 - alpha) * temp * temp * kd + alpha * task;
    total_err = std::max(total_err, std::abs(total_loss(kd, task, alpha, temp) - want) / std::max(1.0, std::abs(want)));
    total_err = std::max(total_err, std::abs(total_loss(Tensor::scalar(kd), Tensor::scalar(task), alpha, temp).item() - want) /
                                        std::max(1.0, std::abs(want)));
    alpha_one_exact &= total_loss(kd, task, 1.0, temp) == task;
    alpha_one_exact &= total_loss(Tensor::scalar(kd), Tensor::scalar(task), 1.0, temp).item() == task;
  }
  const bool pass = kd_err <= 1e-10 && task_err <= 1e-10 && total_err <= 1e-10 && alpha_one_exact;
  report(2, pass, "100 instances: kd " + fmt(kd_err, 3) + ", task " + fmt(task_err, 3) + ", total " +
                      fmt(total_err, 3) + " (<= 1e-10); alpha=1 bit-exact " + (alpha_one_exact ? "yes" : "no"));
}

void criterion_gibbs() {
  Rng rng(99);
  double worst = 1e300;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(8), c = 2 + rng.below(20);
    const double spread = rng.uniform(0.01, 8.0);
    Tensor t = random_stochastic(n, c, rng, spread), s = random_stochastic(n, c, rng, rng.uniform(0.01, 8.0));
    worst = std::min(worst, kd_loss(t, s).item() - kd_loss(t, t).item());
  }
  report(3, worst >= -1e-12, "1000 pairs, min kd(T,S) - kd(T,T) = " + fmt(worst, 3) + " (>= -1e-12)");
}

// ---------------------------------------------------------------- 4

double ap_reference(const std::vector<double>& s, const std::vector<bool>& pos) {
  const std::size_t n = s.size();
  auto rank = [&](std::size_t i) {
    std::size_t r = 1;
    for (std::size_t j = 0; j < n; ++j)
      if (s[j] > s[i] || (s[j] == s[i] && j < i)) ++r;
    return r;
  };
  // (rank, precision at rank) per positive, summed best rank first
  std::vector<std::pair<std::size_t, double>> terms;
  for (std::size_t i = 0; i < n; ++i) {
    if (!pos[i]) continue;
    const std::size_t ri = rank(i);
    std::size_t hits = 0;
    for (std::size_t j = 0; j < n; ++j) hits += pos[j] && rank(j) <= ri;
    terms.emplace_back(ri, static_cast<double>(hits) / static_cast<double>(ri));
  }
  std::sort(terms.begin(), terms.end());
  double total = 0.0;
  for (const auto& t : terms) total += t.second;
  return total / static_cast<double>(terms.size());
}

void criterion_map() {
  Rng rng(4);
  std::size_t subsets = 0, mismatches = 0;
  for (std::size_t n = 1; n <= 8; ++n) {
    for (int draw = 0; draw < 3; ++draw) {
      std::vector<double> s(n);
      for (auto& v : s) v = draw == 0 ? rng.uniform() : std::round(rng.uniform() * 3);
      for (std::uint32_t mask = 1; mask < (1u << n); ++mask) {
        std::vector<bool> pos(n);
        for (std::size_t i = 0; i < n; ++i) pos[i] = (mask >> i) & 1u;
        ++subsets;
        mismatches += *average_precision(s, pos) != ap_reference(s, pos);
      }
    }
  }
  double map_err = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor sc = random_tensor({40, 4}, 1000 + trial);
    std::vector<std::size_t> y(40);
    for (auto& v : y) v = rng.below(4);
    double sum = 0.0;
    std::size_t used = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      std::vector<double> col(40);
      std::vector<bool> pos(40);
      bool any = false;
      for (std::size_t i = 0; i < 40; ++i) {
        col[i] = sc[i * 4 + k];
        any |= pos[i] = y[i] == k;
      }
      if (!any) continue;
      sum += ap_reference(col, pos);
      ++used;
    }
    map_err = std::max(map_err, std::abs(mean_ap({sc, y}).map - sum / static_cast<double>(used)));
  }
  report(4, mismatches == 0 && map_err <= 1e-12,
         std::to_string(subsets) + " subsets, " + std::to_string(mismatches) + " mismatches; mean_ap max err " +
             fmt(map_err, 3) + " (<= 1e-12)");
}

// ---------------------------------------------------------------- 5

bool same_double(double a, double b) { return std::abs(a - b) <= 4 * std::numeric_limits<double>::epsilon() * std::abs(b); }

void criterion_schedule() {
  const DistillConfig t = DistillConfig::teacher_defaults(), s = DistillConfig::student_defaults();
  const double t10 = lr_at(10, t.lr, t.sched_step, t.sched_gamma);
  const double s5 = lr_at(5, s.lr, s.sched_step, s.sched_gamma);
  bool shape = true;
  for (int e = 0; e < t.epochs; ++e)
    shape &= same_double(lr_at(e, t.lr, t.sched_step, t.sched_gamma), 0.001 * std::pow(0.1, e / 10));
  for (int e = 0; e < s.epochs; ++e)
    shape &= same_double(lr_at(e, s.lr, s.sched_step, s.sched_gamma), 0.001 * std::pow(0.3, e / 5));
  const bool pass = same_double(t10, 0.0001) && same_double(s5, 0.0003) && shape &&
                    lr_at(9, t.lr, t.sched_step, t.sched_gamma) == 0.001 &&
                    lr_at(4, s.lr, s.sched_step, s.sched_gamma) == 0.001;
  report(5, pass, "teacher lr(10) = " + fmt(t10, 17) + ", student lr(5) = " + fmt(s5, 17));
}

// ---------------------------------------------------------------- 6, 7

struct RunResult {
  std::string preset;
  int seed = 0;
  bool distilled = false;
  double acc = 0.0;
  double map = 0.0;
  double cos_logits = 0.0;
  double cos_features = 0.0;
  double seconds = 0.0;
};

struct Experiment {
  SplitDataset data;
  AugmentConfig augment;
  std::unique_ptr<Model> teacher;
  std::unique_ptr<Model> sample_student;
  std::vector<RunResult> runs;
  double teacher_acc = 0.0;
  double teacher_map = 0.0;
};

AugmentConfig experiment_augment() {
  AugmentConfig a;
  a.target_h = a.target_w = 16;
  a.hflip_prob = 0.0;  // flipped digits are different digits
  return a;
}

void run_experiment(Experiment& ex, const Options& opt) {
  ex.data = load_dataset_dir(KDLAB_TEST_DATA "/digits");
  ex.augment = experiment_augment();
  const ModelShape shape{1, 16, ex.data.train.num_classes()};
  std::ofstream log(opt.work / "experiment.csv");
  log << "preset,seed,mode,acc,map,cosine_logits,cosine_features,seconds\n";

  auto t0 = Clock::now();
  DistillConfig tc = DistillConfig::teacher_defaults();
  if (opt.teacher_epochs > 0) tc.epochs = opt.teacher_epochs;
  ex.teacher = make_model("teacher", shape, 0);
  train_regular(*ex.teacher, ex.data.train, ex.data.test, tc, ex.augment, [](const MetricsReport& r) {
    if (r.split == "test") std::cerr << "  teacher epoch " << r.epoch << " acc " << r.acc << " map " << r.map << "\n";
  });
  Evaluation te = evaluate(*ex.teacher, ex.data.test, ex.augment);
  ex.teacher_acc = te.accuracy;
  ex.teacher_map = te.ap.map;
  save_checkpoint(opt.work / "teacher.kdck", *ex.teacher);
  std::cerr << "  teacher done in " << seconds_since(t0) << " s, test acc " << te.accuracy << "\n";
  log << "teacher,0,regular," << te.accuracy << "," << te.ap.map << ",,," << seconds_since(t0) << "\n";

  for (const std::string preset : {"vit", "pvt", "hybrid"}) {
    for (int seed = 0; seed < opt.seeds; ++seed) {
      for (bool distilled : {false, true}) {
        auto r0 = Clock::now();
        DistillConfig sc = DistillConfig::student_defaults();
        if (opt.student_epochs > 0) sc.epochs = opt.student_epochs;
        sc.seed = static_cast<std::uint64_t>(seed);
        auto student = make_model(preset, shape, static_cast<std::uint64_t>(seed) + 1);
        if (distilled)
          distill_train(*ex.teacher, *student, ex.data.train, ex.data.test, sc, ex.augment);
        else
          train_regular(*student, ex.data.train, ex.data.test, sc, ex.augment);
        Evaluation ev = evaluate(*student, ex.data.test, ex.augment);
        RunResult rr{preset, seed, distilled, ev.accuracy, ev.ap.map, 0, 0, 0};
        rr.cos_logits = compare_representations(*ex.teacher, *student, ex.data.test, ex.augment, "logits",
                                                static_cast<std::uint64_t>(seed)).cosine_mean;
        rr.cos_features = compare_representations(*ex.teacher, *student, ex.data.test, ex.augment, "features",
                                                  static_cast<std::uint64_t>(seed)).cosine_mean;
        rr.seconds = seconds_since(r0);
        std::cerr << "  " << preset << " seed " << seed << (distilled ? " distilled" : " regular  ") << " acc "
                  << rr.acc << " map " << rr.map << " cos(logits) " << rr.cos_logits << " cos(features) "
                  << rr.cos_features << " [" << rr.seconds << " s]\n";
        log << preset << "," << seed << "," << (distilled ? "distilled" : "regular") << "," << rr.acc << ","
            << rr.map << "," << rr.cos_logits << "," << rr.cos_features << "," << rr.seconds << "\n";
        log.flush();
        ex.runs.push_back(rr);
        if (!ex.sample_student && distilled) ex.sample_student = std::move(student);
      }
    }
  }
}

struct Means {
  double acc = 0, map = 0, cos_logits = 0, cos_features = 0;
};

Means means(const Experiment& ex, const std::string& preset, bool distilled) {
  Means m;
  int n = 0;
  for (const auto& r : ex.runs) {
    if (r.preset != preset || r.distilled != distilled) continue;
    m.acc += r.acc;
    m.map += r.map;
    m.cos_logits += r.cos_logits;
    m.cos_features += r.cos_features;
    ++n;
  }
  if (n > 0) {
    m.acc /= n;
    m.map /= n;
    m.cos_logits /= n;
    m.cos_features /= n;
  }
  return m;
}

void criterion_direction(const Experiment& ex, double seconds) {
  int acc_wins = 0, map_wins = 0;
  std::ostringstream d;
  d << "teacher acc " << fmt(ex.teacher_acc, 4) << ";";
  for (const std::string preset : {"vit", "pvt", "hybrid"}) {
    const Means r = means(ex, preset, false), k = means(ex, preset, true);
    acc_wins += k.acc >= r.acc;
    map_wins += k.map >= r.map;
    d << " " << preset << " acc " << fmt(r.acc, 4) << "->" << fmt(k.acc, 4) << " map " << fmt(r.map, 4) << "->"
      << fmt(k.map, 4) << ";";
  }
  d << " wins acc " << acc_wins << "/3 map " << map_wins << "/3; " << fmt(seconds / 60.0, 3) << " min (< 60)";
  report(6, acc_wins >= 2 && map_wins >= 2 && seconds < 3600.0, d.str());
}

void criterion_alignment(const Experiment& ex) {
  double reg = 0, kd = 0, reg_f = 0, kd_f = 0;
  for (const std::string preset : {"vit", "pvt", "hybrid"}) {
    const Means r = means(ex, preset, false), k = means(ex, preset, true);
    reg += r.cos_logits / 3;
    kd += k.cos_logits / 3;
    reg_f += r.cos_features / 3;
    kd_f += k.cos_features / 3;
  }
  report(7, kd_f > reg_f,
         "mean cosine to teacher (penultimate features) regular " + fmt(reg_f, 4) + ", distilled " +
             fmt(kd_f, 4) + "; logits (informational) " + fmt(reg, 4) + " vs " + fmt(kd, 4));
}

// ---------------------------------------------------------------- 8

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void criterion_determinism(const Options& opt) {
  const fs::path root = opt.work / "rerun";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string data = KDLAB_TEST_DATA "/digits";
  std::ostringstream sink;
  auto cli = [&](std::vector<std::string> args) { return run_cli(args, sink, sink); };
  struct Case {
    std::string command;
    std::vector<std::string> args;
    std::vector<std::string> files;
  };
  const std::string teacher = (root / "train_a" / "final.kdck").string();
  const std::string student = (root / "distill_a" / "final.kdck").string();
  std::vector<Case> cases{
      {"train", {"--model", "teacher", "--epochs", "1", "--image-size", "8", "--seed", "3"}, {"metrics.csv", "final.kdck"}},
      {"distill", {"--model", "pvt", "--teacher-ckpt", teacher, "--epochs", "1", "--image-size", "8", "--seed", "4"},
       {"metrics.csv", "final.kdck"}},
      {"evaluate", {"--ckpt", student}, {"eval.jsonl"}},
      {"compare", {"--teacher-ckpt", teacher, "--ckpt", student}, {"similarity.csv", "summary.json"}},
  };
  bool pass = true;
  std::ostringstream d;
  for (const auto& c : cases) {
    const fs::path a = root / (c.command + "_a"), b = root / (c.command + "_b");
    std::vector<std::string> first{c.command, "--data", data, "--out", a.string()};
    first.insert(first.end(), c.args.begin(), c.args.end());
    const int ca = cli(first);
    const int cb = cli({c.command, "--config", (a / "config.resolved").string(), "--out", b.string()});
    bool same = ca == 0 && cb == 0;
    for (const auto& f : c.files) same &= fs::exists(a / f) && slurp(a / f) == slurp(b / f);
    d << " " << c.command << (same ? " identical" : " DIFFERS") << ";";
    pass &= same;
  }
  if (!pass) std::cerr << sink.str();
  report(8, pass, "re-run from config.resolved:" + d.str());
}

// ---------------------------------------------------------------- 9

void criterion_checkpoint(const Experiment& ex, const Options& opt) {
  bool bytes_ok = true;
  double worst = 0.0;
  std::vector<Model*> models{ex.teacher.get()};
  if (ex.sample_student) models.push_back(ex.sample_student.get());
  std::ostringstream d;
  for (Model* m : models) {
    const fs::path a = opt.work / ("roundtrip_" + m->preset() + "_a.kdck");
    const fs::path b = opt.work / ("roundtrip_" + m->preset() + "_b.kdck");
    Evaluation before = evaluate(*m, ex.data.test, ex.augment);
    save_checkpoint(a, *m);
    auto loaded = load_model(a, m->preset());
    save_checkpoint(b, *loaded);
    bytes_ok &= slurp(a) == slurp(b);
    Evaluation after = evaluate(*loaded, ex.data.test, ex.augment);
    const double e = std::max(std::abs(before.accuracy - after.accuracy), std::abs(before.ap.map - after.ap.map));
    worst = std::max(worst, e);
    d << " " << m->preset() << " |d| " << fmt(e, 3) << ";";
  }
  report(9, bytes_ok && worst < 1e-6,
         std::string("save->load->save ") + (bytes_ok ? "byte-identical" : "DIFFERS") + ";" + d.str() + " (< 1e-6)");
}

Options parse(int argc, char** argv) {
  Options o;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    auto next = [&]() -> std::string {
      if (i + 1 >= argc) throw std::runtime_error("missing value after " + a);
      return argv[++i];
    };
    if (a == "--work") o.work = next();
    else if (a == "--seeds") o.seeds = std::stoi(next());
    else if (a == "--teacher-epochs") o.teacher_epochs = std::stoi(next());
    else if (a == "--student-epochs") o.student_epochs = std::stoi(next());
    else if (a == "--only") {
      std::stringstream ss(next());
      for (std::string x; std::getline(ss, x, ',');) o.only.insert(std::stoi(x));
    } else throw std::runtime_error("unknown argument " + a);
  }
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  Options opt;
  try {
    opt = parse(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }
  fs::create_directories(opt.work);
  auto want = [&](int id) { return opt.only.empty() || opt.only.count(id) > 0; };
  if (opt.seeds != 5 || opt.teacher_epochs > 0 || opt.student_epochs > 0)
    std::cerr << "note: reduced experiment settings, criteria 6 and 7 are not at spec scale\n";

  try {
    if (want(1)) criterion_gradients();
    if (want(2)) criterion_losses();
    if (want(3)) criterion_gibbs();
    if (want(4)) criterion_map();
    if (want(5)) criterion_schedule();
    Experiment ex;
    if (want(6) || want(7) || want(9)) {
      auto t0 = Clock::now();
      run_experiment(ex, opt);
      const double secs = seconds_since(t0);
      if (want(6)) criterion_direction(ex, secs);
      if (want(7)) criterion_alignment(ex);
    }
    if (want(8)) criterion_determinism(opt);
    if (want(9)) criterion_checkpoint(ex, opt);
  } catch (const std::exception& e) {
    std::cout << "FAIL aborted: " << e.what() << std::endl;
    return 1;
  }
  return failures == 0 ? 0 : 1;
}
