// fcss: command-line front end.
//
// Exit codes: 0 success, 1 check failure, 2 usage or I/O error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fcss/fcss.hpp"
#include "image_io.hpp"

namespace fs = std::filesystem;
using namespace fcss;

#ifdef FCSS_SINGLE_PRECISION
using Real = float;
#else
using Real = double;
#endif

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;

struct Globals {
  uint64_t seed = 1;
  int threads = 1;
};

void print_header(const char* command, const Globals& g) {
  std::cout << "command=" << command << " seed=" << g.seed << " threads=" << num_threads() << '\n';
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

// ---- init -------------------------------------------------------------------

struct InitArgs {
  std::string out;
  int patterns = 64;
  double radius = 4.0;
  int pool_radius = 1;
  double bandwidth = 0.005;
  std::string mode = "continuous-bilinear";
};

int run_init(const InitArgs& a, const Globals& g) {
  print_header("init", g);
  CssConfig cc;
  cc.patterns_per_level = a.patterns;
  cc.pattern_radius = a.radius;
  cc.pool_radius = a.pool_radius;
  cc.initial_bandwidth = a.bandwidth;
  cc.shift_mode = parse_shift_mode(a.mode);
  Rng rng(g.seed);
  const auto m = make_model<Real>(rng, BackboneConfig::default_plan(), cc);
  save_model(a.out, m);
  std::cout << "K=" << m.levels() << " patterns_per_level=" << cc.patterns_per_level
            << " L=" << m.descriptor_dim() << " R=" << cc.pattern_radius << " pool_radius=" << cc.pool_radius
            << " shift_mode=" << to_string(cc.shift_mode) << '\n';
  std::cout << "wrote " << a.out << '\n';
  return kExitOk;
}

// ---- extract ----------------------------------------------------------------

struct ExtractArgs {
  std::string image;
  std::string model;
  std::string out;
  std::string pyramid;
};

int run_extract(const ExtractArgs& a, const Globals& g) {
  print_header("extract", g);
  const auto m = load_model<Real>(a.model);
  const auto img = image::load<Real>(a.image);
  DenseDescriptorField<Real> f;
  if (!a.pyramid.empty()) {
    const auto pyr = inject_pyramid<Real>(a.pyramid);
    f = extract_from_pyramid(pyr, m, img.height(), img.width());
  } else {
    f = extract_dense(img, m);
  }
  save_tensor(a.out, f.values);
  std::cout << "L=" << f.dim() << " H=" << f.height() << " W=" << f.width() << '\n';
  for (const auto& s : f.level_spans)
    std::cout << "level=" << s.level << " channels=" << s.begin << ".." << s.end << '\n';
  std::cout << "wrote " << a.out << '\n';
  return kExitOk;
}

// ---- gradcheck --------------------------------------------------------------

struct GradcheckArgs {
  std::string mode = "continuous-bilinear";
  double tolerance = 1e-4;
};

int run_gradcheck_cmd(const GradcheckArgs& a, const Globals& g) {
  GradcheckOptions opt;
  opt.mode = parse_shift_mode(a.mode);
  opt.seed = g.seed;
  opt.tolerance = a.tolerance;
  print_header("gradcheck", g);
  std::cout << "mode=" << to_string(opt.mode) << " tolerance=" << fmt(opt.tolerance) << '\n';
  std::vector<std::string> failed;
  for (const auto& r : run_gradcheck(opt)) {
    const char* status = !r.enforced ? "approximate" : (r.passed(opt.tolerance) ? "ok" : "FAIL");
    std::cout << "group=" << r.name << " entries=" << r.entries << " max_rel_err=" << fmt(r.max_relative_error)
              << " status=" << status << '\n';
    if (!r.passed(opt.tolerance)) failed.push_back(r.name);
  }
  if (!failed.empty()) {
    std::cout << "result=FAIL groups=";
    for (std::size_t i = 0; i < failed.size(); ++i) std::cout << (i ? "," : "") << failed[i];
    std::cout << '\n';
    return kExitCheckFailed;
  }
  std::cout << "result=ok\n";
  return kExitOk;
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  std::string manifest;
  std::string model_in;
  std::string model_out;
  int epochs = 5;
  double lr = TrainConfig{}.learning_rate;
  double momentum = TrainConfig{}.momentum;
  bool freeze_backbone = true;
  double tau = MiningConfig{}.tau;
  int candidates = MiningConfig{}.candidates;
  double positive_fraction = LossConfig{}.positive_fraction;
};

int run_train(const TrainArgs& a, const Globals& g) {
  print_header("train", g);
  const auto entries = load_manifest(a.manifest);
  auto m = load_model<Real>(a.model_in);
  std::vector<ImagePairSample<Real>> pairs;
  for (const auto& e : entries) {
    ImagePairSample<Real> p{image::load<Real>(e.source), image::load<Real>(e.target), e.source_bbox, e.target_bbox};
    p.validate();
    pairs.push_back(std::move(p));
  }
  TrainConfig cfg;
  cfg.learning_rate = a.lr;
  cfg.momentum = a.momentum;
  cfg.freeze_backbone = a.freeze_backbone;
  cfg.mining.tau = a.tau;
  cfg.mining.candidates = a.candidates;
  cfg.loss.positive_fraction = a.positive_fraction;
  cfg.loss.validate();
  if (a.epochs < 0) throw ConfigError("--epochs must be >= 0");
  std::cout << "pairs=" << pairs.size() << " epochs=" << a.epochs << " lr=" << fmt(cfg.learning_rate)
            << " momentum=" << fmt(cfg.momentum) << " freeze_backbone=" << (cfg.freeze_backbone ? 1 : 0)
            << " margin=" << fmt(cfg.loss.margin) << " batch_cap=" << cfg.loss.batch_cap
            << " positive_fraction=" << fmt(cfg.loss.positive_fraction) << " tau=" << fmt(cfg.mining.tau)
            << '\n';
  Rng rng(g.seed);
  OptimizerState<Real> state;
  for (int e = 1; e <= a.epochs; ++e) {
    const auto s = train_epoch(pairs, m, state, cfg, rng);
    std::cout << "epoch=" << e << " mean_loss=" << fmt(s.mean_loss()) << " positives=" << s.total_positives()
              << " negatives=" << s.total_negatives() << " mean_positive_distance=" << fmt(s.mean_positive_distance())
              << '\n';
  }
  save_model(a.model_out, m);
  std::cout << "wrote " << a.model_out << '\n';
  return kExitOk;
}

// ---- match ------------------------------------------------------------------

struct MatchArgs {
  std::string source;
  std::string target;
  std::string model;
  std::string bbox_a;
  std::string bbox_b;
  std::string out_flow;
  std::string out_warp;
  std::string out_vis;
  int smooth_iters = 0;
  int window = -1;
  double consistency = -1.0;
};

int run_match(const MatchArgs& a, const Globals& g) {
  print_header("match", g);
  const auto m = load_model<Real>(a.model);
  const auto src = image::load<Real>(a.source);
  const auto tgt = image::load<Real>(a.target);
  if (src.height() != tgt.height() || src.width() != tgt.width())
    throw ShapeError("source and target images must share a size");
  const auto fa = extract_dense(src, m), fb = extract_dense(tgt, m);
  NnFlowOptions opt;
  if (!a.bbox_a.empty()) opt.source_region = parse_rect(a.bbox_a);
  if (!a.bbox_b.empty()) opt.search_region = parse_rect(a.bbox_b);
  opt.window_radius = a.window;
  auto flow = nn_flow(fa, fb, opt);
  if (a.consistency >= 0.0) {
    NnFlowOptions rev;
    rev.source_region = opt.search_region;
    rev.search_region = opt.source_region;
    rev.window_radius = opt.window_radius;
    const auto back = nn_flow(fb, fa, rev);
    const auto mask = lr_consistency_mask(flow, back, a.consistency);
    for (std::size_t i = 0; i < mask.size(); ++i) flow.valid[i] = flow.valid[i] && mask[i];
  }
  flow = smooth_flow(flow, a.smooth_iters);
  long valid = 0;
  double mag = 0.0;
  for (int y = 0; y < flow.height(); ++y)
    for (int x = 0; x < flow.width(); ++x)
      if (flow.is_valid(y, x)) {
        ++valid;
        mag += std::hypot<double>(flow.dx(y, x), flow.dy(y, x));
      }
  std::cout << "H=" << flow.height() << " W=" << flow.width() << " valid=" << valid
            << " mean_magnitude=" << fmt(valid ? mag / valid : 0.0) << " smooth_iters=" << a.smooth_iters << '\n';
  save_flow(a.out_flow, flow);
  std::cout << "wrote " << a.out_flow << '\n';
  if (!a.out_warp.empty()) {
    image::save(a.out_warp, warp_image(tgt, flow));
    std::cout << "wrote " << a.out_warp << '\n';
  }
  if (!a.out_vis.empty()) {
    image::save(a.out_vis, flow_to_color(flow));
    std::cout << "wrote " << a.out_vis << '\n';
  }
  return kExitOk;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string flow;
  std::string gt_flow;
  std::string keypoints;
  std::string target_keypoints;
  std::string bbox;
  std::vector<double> alpha;
  double threshold = kFlowAccuracyThreshold;
  bool no_rescale = false;
};

int run_eval(const EvalArgs& a, const Globals& g) {
  print_header("eval", g);
  const auto pred = load_flow<Real>(a.flow);
  if (!a.gt_flow.empty()) {
    const auto gt = load_flow<Real>(a.gt_flow);
    std::cout << "acc=" << fmt(flow_accuracy(pred, gt, a.threshold, !a.no_rescale)) << " threshold=" << fmt(a.threshold)
              << " rescale=" << (a.no_rescale ? 0 : 1) << '\n';
  }
  if (!a.keypoints.empty()) {
    if (a.target_keypoints.empty()) throw ConfigError("--keypoints needs --target-keypoints");
    const auto src = load_keypoints(a.keypoints), tgt = load_keypoints(a.target_keypoints);
    const Rect box = a.bbox.empty() ? Rect::full(pred.width(), pred.height()) : parse_rect(a.bbox);
    std::vector<double> alphas = a.alpha;
    if (alphas.empty()) alphas.assign(std::begin(kPckAlphas), std::end(kPckAlphas));
    for (double al : alphas)
      std::cout << "pck=" << fmt(pck(pred, src, tgt, box, al)) << " alpha=" << fmt(al) << " n=" << src.size() << '\n';
  }
  if (a.gt_flow.empty() && a.keypoints.empty()) throw ConfigError("eval needs --gt-flow or --keypoints");
  return kExitOk;
}

// ---- selftest ---------------------------------------------------------------

struct SelftestArgs {
  bool force_fail = false;
  int oracle_cases = 20;
};

int run_selftest_cmd(const SelftestArgs& a, const Globals& g) {
  print_header("selftest", g);
  SelftestOptions opt;
  opt.seed = g.seed;
  opt.oracle_cases = a.oracle_cases;
  opt.force_failure = a.force_fail;
  const auto rep = run_selftest(opt);
  for (const auto& s : rep.suites)
    std::cout << "suite=" << s.name << " status=" << (s.passed ? "ok" : "FAIL") << (s.detail.empty() ? "" : " ")
              << s.detail << '\n';
  std::cout << "speedup=" << fmt(rep.speed.speedup()) << " reference_s=" << fmt(rep.speed.reference_seconds)
            << " efficient_s=" << fmt(rep.speed.efficient_seconds) << '\n';
  if (!rep.passed()) {
    std::cout << "result=FAIL failed=";
    bool first = true;
    for (const auto& s : rep.suites)
      if (!s.passed) {
        std::cout << (first ? "" : ",") << s.name;
        first = false;
      }
    std::cout << '\n';
    return kExitCheckFailed;
  }
  std::cout << "result=ok\n";
  return kExitOk;
}

// ---- synth ------------------------------------------------------------------

struct SynthArgs {
  std::string out_dir;
  int pairs = 20;
  int size = 64;
  int grid = 5;
};

int run_synth(const SynthArgs& a, const Globals& g) {
  print_header("synth", g);
  if (a.pairs < 1 || a.size < 8) throw ConfigError("synth needs --pairs >= 1 and --size >= 8");
  const fs::path dir(a.out_dir);
  fs::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError("cannot write '" + (dir / "manifest.txt").string() + "'");
  manifest << "# source target source_bbox target_bbox\n";
  for (int i = 0; i < a.pairs; ++i) {
    const uint64_t s = g.seed * 1000003ull + static_cast<uint64_t>(i);
    const auto tex = synth_texture<Real>(a.size, a.size, s);
    const auto sp = synth_pair(tex, WarpBounds{}, s + 17, a.grid);
    char stem[32];
    std::snprintf(stem, sizeof stem, "pair%03d", i);
    const std::string base(stem);
    image::save(dir / (base + "_src.png"), sp.pair.source);
    image::save(dir / (base + "_tgt.png"), sp.pair.target);
    save_flow(dir / (base + "_gt.fcfl"), sp.gt);
    save_keypoints(dir / (base + "_src_kp.txt"), sp.source_keypoints.points);
    save_keypoints(dir / (base + "_tgt_kp.txt"), sp.target_keypoints.points);
    const auto& ba = sp.pair.source_bbox;
    const auto& bb = sp.pair.target_bbox;
    manifest << base << "_src.png " << base << "_tgt.png " << ba.x << ',' << ba.y << ',' << ba.w << ',' << ba.h << ' '
             << bb.x << ',' << bb.y << ',' << bb.w << ',' << bb.h << '\n';
  }
  std::cout << "pairs=" << a.pairs << " size=" << a.size << '\n';
  std::cout << "wrote " << (dir / "manifest.txt").string() << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learned self-similarity dense descriptors: extraction, training, matching, evaluation"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random draw")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads (1 = deterministic)")
      ->envname("FCSS_THREADS")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  InitArgs init;
  auto* c_init = app.add_subcommand("init", "Create a randomly initialized model");
  c_init->add_option("--out", init.out, "Model file to write")->required();
  c_init->add_option("--patterns", init.patterns, "Sampling patterns per level")->capture_default_str();
  c_init->add_option("--radius", init.radius, "Pattern radius R in feature pixels")->capture_default_str();
  c_init->add_option("--pool-radius", init.pool_radius, "Max-pool window radius")->capture_default_str();
  c_init->add_option("--bandwidth", init.bandwidth, "Initial gating bandwidth")->capture_default_str();
  c_init->add_option("--mode", init.mode, "continuous-bilinear | integer-nearest")->capture_default_str();

  ExtractArgs ex;
  auto* c_ex = app.add_subcommand("extract", "Write the dense descriptor field of an image");
  c_ex->add_option("--image", ex.image, "Input image (.png, .ppm, .pgm)")->required();
  c_ex->add_option("--model", ex.model, "Model file")->required();
  c_ex->add_option("--out", ex.out, "Output tensor file")->required();
  c_ex->add_option("--pyramid", ex.pyramid, "Use an external feature pyramid instead of the backbone");

  GradcheckArgs gc;
  auto* c_gc = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences");
  c_gc->add_option("--mode", gc.mode, "continuous-bilinear | integer-nearest")->capture_default_str();
  c_gc->add_option("--tolerance", gc.tolerance, "Relative error bound")->capture_default_str();

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "Learn sampling patterns and bandwidths from image pairs");
  c_tr->add_option("--manifest", tr.manifest, "Pairs: '<source> <target> x,y,w,h x,y,w,h' per line")->required();
  c_tr->add_option("--model-in", tr.model_in, "Starting model")->required();
  c_tr->add_option("--model-out", tr.model_out, "Trained model")->required();
  c_tr->add_option("--epochs", tr.epochs)->capture_default_str();
  c_tr->add_option("--lr", tr.lr, "Learning rate")->capture_default_str();
  c_tr->add_option("--momentum", tr.momentum)->capture_default_str();
  c_tr->add_flag("--freeze-backbone,!--train-backbone", tr.freeze_backbone, "Keep conv weights fixed (default)");
  c_tr->add_option("--tau", tr.tau, "Round-trip tolerance for positives, pixels")->capture_default_str();
  c_tr->add_option("--candidates", tr.candidates, "Source pixels sampled per pair")->capture_default_str();
  c_tr->add_option("--positive-fraction", tr.positive_fraction, "Upper bound on the positive share of a batch")
      ->capture_default_str();

  MatchArgs ma;
  auto* c_ma = app.add_subcommand("match", "Dense nearest-neighbour flow between two images");
  c_ma->add_option("--source", ma.source)->required();
  c_ma->add_option("--target", ma.target)->required();
  c_ma->add_option("--model", ma.model)->required();
  c_ma->add_option("--bbox-a", ma.bbox_a, "Source region x,y,w,h");
  c_ma->add_option("--bbox-b", ma.bbox_b, "Target search region x,y,w,h");
  c_ma->add_option("--out-flow", ma.out_flow)->required();
  c_ma->add_option("--out-warp", ma.out_warp, "Target warped into the source frame");
  c_ma->add_option("--out-vis", ma.out_vis, "Colour-coded flow image");
  c_ma->add_option("--smooth-iters", ma.smooth_iters, "Median outlier-removal passes")->capture_default_str();
  c_ma->add_option("--window", ma.window, "Search window radius (-1: whole region)")->capture_default_str();
  c_ma->add_option("--consistency", ma.consistency, "Invalidate pixels failing the round trip by this many pixels");

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "Score a flow against ground truth or keypoints");
  c_ev->add_option("--flow", ev.flow)->required();
  c_ev->add_option("--gt-flow", ev.gt_flow, "Ground-truth flow; reports acc");
  c_ev->add_option("--keypoints", ev.keypoints, "Source keypoints; reports pck");
  c_ev->add_option("--target-keypoints", ev.target_keypoints);
  c_ev->add_option("--bbox", ev.bbox, "Object box x,y,w,h for the PCK radius");
  c_ev->add_option("--alpha", ev.alpha, "PCK alpha (repeatable)");
  c_ev->add_option("--threshold", ev.threshold, "Endpoint error threshold")->capture_default_str();
  c_ev->add_flag("--no-rescale", ev.no_rescale, "Score at native resolution");

  SelftestArgs st;
  auto* c_st = app.add_subcommand("selftest", "Oracle, gradient, invariant and timing suites");
  c_st->add_flag("--force-fail", st.force_fail, "Append a failing suite (test hook)");
  c_st->add_option("--oracle-cases", st.oracle_cases)->capture_default_str();

  SynthArgs sy;
  auto* c_sy = app.add_subcommand("synth", "Generate warped texture pairs with ground truth");
  c_sy->add_option("--out-dir", sy.out_dir)->required();
  c_sy->add_option("--pairs", sy.pairs)->capture_default_str();
  c_sy->add_option("--size", sy.size)->capture_default_str();
  c_sy->add_option("--grid", sy.grid, "Keypoint grid per side")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    set_num_threads(g.threads);
    if (*c_init) return run_init(init, g);
    if (*c_ex) return run_extract(ex, g);
    if (*c_gc) return run_gradcheck_cmd(gc, g);
    if (*c_tr) return run_train(tr, g);
    if (*c_ma) return run_match(ma, g);
    if (*c_ev) return run_eval(ev, g);
    if (*c_st) return run_selftest_cmd(st, g);
    if (*c_sy) return run_synth(sy, g);
  } catch (const fcss::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
