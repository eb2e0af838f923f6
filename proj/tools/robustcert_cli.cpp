// robustcert: train, certify and attack ReLU classifiers with dual-network bounds.
#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include <nlohmann/json.hpp>

#include "robustcert/robustcert.hpp"

namespace fs = std::filesystem;
using namespace robustcert;
using nlohmann::json;

namespace {

// Flags shared by most commands.
struct Common {
  std::string model;
  std::string data;
  std::string split = "test";
  double eps = 0.1;
  std::string norm = "linf";
  std::uint64_t seed = 0;
  std::string out = ".";
  int threads = 1;
  std::size_t limit = 0;  // 0 keeps everything
  std::optional<double> domain_lo, domain_hi;

  DualNorm q() const { return parse_ball(norm); }
};

void add_model(CLI::App* c, Common& o) { c->add_option("--model", o.model, "Model JSON")->required()->check(CLI::ExistingFile); }

void add_data(CLI::App* c, Common& o, bool required = true) {
  auto* d = c->add_option("--data", o.data,
                          "Dataset: a CSV file (x0..x{d-1},label) or a directory holding an IDX pair "
                          "(train-images-idx3-ubyte[.gz] / t10k-...)");
  if (required) d->required();
  c->add_option("--split", o.split, "IDX split when --data is a directory")->check(CLI::IsMember({"train", "test"}));
  c->add_option("--limit", o.limit, "Keep only the first N examples (0 = all)");
  c->add_option("--domain-lo", o.domain_lo, "Lower end of the input box for CSV data (default: unbounded)");
  c->add_option("--domain-hi", o.domain_hi, "Upper end of the input box for CSV data (default: unbounded)");
}

void add_eps(CLI::App* c, Common& o) {
  c->add_option("--eps", o.eps, "Perturbation radius")->check(CLI::NonNegativeNumber);
  c->add_option("--norm", o.norm, "Perturbation ball")->check(CLI::IsMember({"linf", "l2"}));
}

void add_run(CLI::App* c, Common& o) {
  c->add_option("--seed", o.seed, "Master seed; sub-streams are derived per purpose");
  c->add_option("--out", o.out, "Output directory");
  c->add_option("--threads", o.threads, "Worker threads (1 = deterministic single-threaded)")->check(CLI::PositiveNumber);
}

fs::path find_idx(const fs::path& dir, const std::string& stem) {
  for (const char* ext : {".gz", ""}) {
    const fs::path p = dir / (stem + ext);
    if (fs::exists(p)) return p;
  }
  throw Error("no " + stem + "[.gz] in " + dir.string());
}

Dataset load_data(const Common& o) {
  Dataset d;
  const std::optional<std::size_t> lim = o.limit ? std::optional(o.limit) : std::nullopt;
  if (fs::is_directory(o.data)) {
    const std::string pre = o.split == "train" ? "train" : "t10k";
    d = load_idx(find_idx(o.data, pre + "-images-idx3-ubyte"), find_idx(o.data, pre + "-labels-idx1-ubyte"), lim);
  } else {
    d = load_csv(o.data);
    if (lim && *lim < d.size()) d = d.slice(0, *lim);
  }
  if (o.domain_lo || o.domain_hi) {
    const double inf = std::numeric_limits<double>::infinity();
    d.domain = std::make_pair(Vector::Constant(d.dim(), o.domain_lo.value_or(-inf)),
                              Vector::Constant(d.dim(), o.domain_hi.value_or(inf)));
  }
  d.validate();
  return d;
}

Network load_model_for(const Common& o, const Dataset& d) {
  Network net = load_network(o.model);
  if (net.input_dim() != d.dim())
    throw DimensionError("model input_dim " + std::to_string(net.input_dim()) + " != data dimension " +
                         std::to_string(d.dim()), 0);
  if (net.output_dim() < d.num_classes)
    throw DimensionError("model has " + std::to_string(net.output_dim()) + " outputs but data has " +
                         std::to_string(d.num_classes) + " classes");
  return net;
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> v;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!tok.empty()) v.push_back(std::stod(tok));
  return v;
}

void write_json(const fs::path& p, const json& j) { write_file_atomic(p, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// Schemas shown in --help

constexpr const char* kGenDataSchema = R"(
Output: dataset CSV
  header  x0,x1,...,x{d-1},label
  rows    one example per line; values in shortest round-trip decimal form)";

constexpr const char* kTrainSchema = R"(
Outputs in --out:
  model.json    list of layer records:
                  {"kind":"dense","in","out","weight":[out*in, row-major],"bias":[out]}
                  {"kind":"conv2d","in_ch","out_ch","kh","kw","stride","pad","in_h","in_w",
                   "layout":"chw","weight":[out_ch*in_ch*kh*kw],"bias":[out_ch]}
  metrics.csv   epoch,eps,clean_loss,clean_err,robust_loss,robust_err_bound
                  one row per epoch; losses and errors are example-weighted means over the
                  epoch's batches, evaluated before each step; robust_* is empty for standard
                  training with --no-track-robust
  batches.csv   epoch,batch,eps,clean_loss,robust_loss  (per batch, robust_loss >= clean_loss)
  checkpoint_epoch<E>.json  (with --checkpoint-every) model after epoch E
  train.json    {"steps","stopped_early","final":{metrics row},"config":{...}})";

constexpr const char* kCertifySchema = R"(
Outputs in --out:
  certificates.jsonl  one JSON object per example:
                        {"index","label","predicted","correct","certified","margin","eps",
                         "max_certified_eps","newton_iterations"}
                      margin = min over targets i != label of the dual bound J; certified iff
                      margin >= 0; the last two fields are null unless --max-eps
  certify_summary.csv n,eps,clean_err,robust_err,mean_max_certified_eps)";

constexpr const char* kAttackSchema = R"(
Outputs in --out:
  attack.csv          index,label,predicted,fgsm_success,fgsm_loss,pgd_success,pgd_loss,certified
                        *_success is 1 when the example is misclassified already or the attack
                        found a misclassified point in the ball
  attack_summary.csv  eps,test_error,fgsm_error,pgd_error,robust_error_bound
  Also reports on stdout how many certified examples were attacked successfully (always 0).)";

constexpr const char* kEvalSchema = R"(
Output: eval.json in --out
  {"n","eps","norm","clean_err","clean_loss","robust_err_bound","robust_loss"})";

constexpr const char* kOracleSchema = R"(
Output: tightness.csv in --out
  index,label,target,dual_bound,lp_optimum,gap,span_count
    one row per example and target class != label; gap = lp_optimum - dual_bound >= 0;
    span_count = number of hidden units whose bounds straddle zero)";

constexpr const char* kPolytopeSchema = R"(
Outputs in --out (2-output networks only):
  polytope.csv     kind,order,z0,z1
                     kind=sample  network output at a grid point of the input ball
                     kind=hull    convex hull vertex of the samples, in order
                     kind=outer   vertex of the outer bound polygon, in order
  outer_bound.json {"eps","x","box":{"lower","upper"},"directions":[[c0,c1],...],
                    "offsets":[J...],"hull_area","outer_area"}
                   the outer bound is the box intersected with c^T z >= J(c) per direction)";

constexpr const char* kBoundsSchema = R"(
Outputs in --out:
  bounds.json      for the example at --index:
                   {"eps","norm","index","layers":[{"layer","lower","upper","neg","pos","span",
                    "frac_neg","frac_pos","frac_span","naive_lower","naive_upper"}]}
                   neg/pos/span hold unit indices; the last layer has no partition
  index_sets.csv   example,layer,frac_neg,frac_pos,frac_span  (hidden layers, every example))";

constexpr const char* kManifestSchema = R"(
Manifest JSON:
  {"steps":[{"command":"gen-data","args":{"kind":"2d","seed":1,"out":"run/data.csv"}},
            {"command":"train","args":{"data":"run/data.csv","eps":0.08,"out":"run"}}, ...]}
  args map flag names (without dashes) to values; true adds a bare flag, false omits it.
  Steps run in order; the first failure stops the run with its exit code.)";

// ---------------------------------------------------------------------------
// Commands

struct GenDataOpts {
  std::string kind = "2d";
  std::size_t n = 12;
  double min_sep = 0.16;
  std::string images, labels;
};

int cmd_gen_data(const Common& c, const GenDataOpts& g) {
  Dataset d;
  if (g.kind == "2d") {
    d = gen_2d(c.seed, g.n, g.min_sep);
  } else {
    if (g.images.empty() || g.labels.empty()) throw InvalidArgument("--kind idx needs --images and --labels");
    d = load_idx(g.images, g.labels, c.limit ? std::optional(c.limit) : std::nullopt);
  }
  save_csv(d, c.out);
  std::cout << "wrote " << d.size() << " examples of dimension " << d.dim() << " to " << c.out << "\n";
  return 0;
}

struct TrainOpts {
  std::string arch = "mlp";
  std::string hidden = "100,100,100,100";
  std::string init = "zero_bias";
  std::string init_model;
  int epochs = 1;
  std::size_t batch_size = 50;
  double lr = 1e-3;
  std::string optimizer = "adam";
  std::string loss = "cross_entropy";
  std::optional<double> eps_start;
  int ramp_epochs = 0;
  bool standard = false;
  bool stop_when_certified = false;
  bool no_track_robust = false;
  int checkpoint_every = 0;
  int kernel = 4, pad = 1, dense_hidden = 100;
};

Network build_model(const TrainOpts& t, const Dataset& d, std::uint64_t seed) {
  if (!t.init_model.empty()) return load_network(t.init_model);
  const InitLaw law = t.init == "gaussian_bias" ? InitLaw::GaussianBias : InitLaw::ZeroBias;
  Rng rng = substream(seed, "init");
  const int classes = d.num_classes;
  if (t.arch == "conv") {
    const auto side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(d.dim()))));
    if (side * side != d.dim()) throw DimensionError("conv architecture needs square single-channel images");
    return init_network(conv_classifier_specs(side, t.kernel, t.pad, t.dense_hidden, classes), rng, law);
  }
  std::vector<Eigen::Index> widths{d.dim()};
  for (double h : parse_list(t.hidden)) widths.push_back(static_cast<Eigen::Index>(h));
  widths.push_back(classes);
  return init_mlp(widths, rng, law);
}

int cmd_train(const Common& c, const TrainOpts& t) {
  const Dataset d = load_data(c);
  Network net = build_model(t, d, c.seed);
  if (net.input_dim() != d.dim()) throw DimensionError("initial model input_dim != data dimension", 0);

  TrainConfig cfg;
  cfg.robust = !t.standard;
  cfg.eps = {t.eps_start.value_or(c.eps), c.eps, t.ramp_epochs};
  if (t.optimizer == "sgd")
    cfg.optimizer = SgdConfig{t.lr};
  else
    cfg.optimizer = AdamConfig{t.lr};
  cfg.batch_size = t.batch_size;
  cfg.epochs = t.epochs;
  cfg.seed = c.seed;
  cfg.loss = parse_loss(t.loss);
  cfg.norm = c.q();
  cfg.threads = c.threads;
  cfg.stop_when_certified = t.stop_when_certified;
  cfg.track_robust = !t.no_track_robust;

  const fs::path out = c.out;
  std::ostringstream batches;
  batches << "epoch,batch,eps,clean_loss,robust_loss\n";
  const bool have_robust = cfg.robust || cfg.track_robust;
  cfg.on_batch = [&](const BatchRecord& r) {
    batches << r.epoch << ',' << r.batch << ',' << format_double(r.eps) << ','
            << format_double(r.report->clean_loss) << ',' << (have_robust ? format_double(r.report->loss) : "")
            << '\n';
  };
  cfg.on_epoch = [&](const EpochMetrics& m) {
    std::cout << "epoch " << m.epoch << " eps " << m.eps << " clean_loss " << m.clean_loss << " clean_err "
              << m.clean_err;
    if (have_robust) std::cout << " robust_loss " << m.robust_loss << " robust_err_bound " << m.robust_err_bound;
    std::cout << "\n";
  };
  if (t.checkpoint_every > 0)
    cfg.on_checkpoint = [&](int epoch, const Network& n) {
      if ((epoch + 1) % t.checkpoint_every == 0)
        save_network(n, out / ("checkpoint_epoch" + std::to_string(epoch) + ".json"));
    };

  const TrainResult r = train(std::move(net), d, cfg);

  std::string metrics = metrics_csv(r.metrics);
  if (!have_robust) {
    // drop the NaN placeholders so the columns stay empty
    std::string cleaned;
    std::istringstream in(metrics);
    std::string line;
    while (std::getline(in, line)) {
      for (std::size_t p; (p = line.find("nan")) != std::string::npos;) line.erase(p, 3);
      cleaned += line + '\n';
    }
    metrics = cleaned;
  }
  save_network(r.net, out / "model.json");
  write_file_atomic(out / "metrics.csv", metrics);
  write_file_atomic(out / "batches.csv", batches.str());
  const EpochMetrics& last = r.metrics.back();
  json summary = {{"steps", r.steps},
                  {"stopped_early", r.stopped_early},
                  {"final",
                   {{"epoch", last.epoch},
                    {"eps", last.eps},
                    {"clean_loss", last.clean_loss},
                    {"clean_err", last.clean_err},
                    {"robust_loss", have_robust ? json(last.robust_loss) : json(nullptr)},
                    {"robust_err_bound", have_robust ? json(last.robust_err_bound) : json(nullptr)}}},
                  {"config",
                   {{"robust", cfg.robust},
                    {"eps", c.eps},
                    {"eps_start", cfg.eps.start},
                    {"ramp_epochs", t.ramp_epochs},
                    {"epochs", t.epochs},
                    {"batch_size", t.batch_size},
                    {"lr", t.lr},
                    {"optimizer", t.optimizer},
                    {"loss", loss_name(cfg.loss)},
                    {"norm", c.norm},
                    {"seed", c.seed},
                    {"n", d.size()}}}};
  write_json(out / "train.json", summary);
  std::cout << "steps " << r.steps << (r.stopped_early ? " (stopped: every example certified)" : "") << "\n";
  std::cout << "wrote " << (out / "model.json").string() << "\n";
  return 0;
}

struct CertifyOpts {
  bool max_eps = false;
  double tol = 1e-3;
  double max_eps_cap = 10.0;
};

int cmd_certify(const Common& c, const CertifyOpts& co) {
  const Dataset d = load_data(c);
  const Network net = load_model_for(c, d);
  CertifyOptions opt;
  opt.eps = c.eps;
  opt.norm = c.q();
  opt.max_eps = co.max_eps;
  opt.newton.tol = co.tol;
  opt.newton.max_eps = co.max_eps_cap;
  opt.threads = c.threads;
  const auto recs = certify_dataset(net, d, opt);
  const CertifySummary s = summarize(recs);
  const fs::path out = c.out;
  write_file_atomic(out / "certificates.jsonl", certificates_jsonl(recs));
  write_file_atomic(out / "certify_summary.csv", summary_csv(s));
  std::cout << "n " << s.n << " eps " << s.eps << " clean_err " << s.clean_err << " robust_err " << s.robust_err;
  if (s.mean_max_eps) std::cout << " mean_max_certified_eps " << *s.mean_max_eps;
  std::cout << "\n";
  return 0;
}

struct AttackOpts {
  int steps = 40;
  int restarts = 10;
  std::optional<double> step_size;
  std::string loss = "cross_entropy";
};

int cmd_attack(const Common& c, const AttackOpts& a) {
  if (c.q() != DualNorm::L1) throw InvalidArgument("attacks support the linf ball only");
  const Dataset d = load_data(c);
  const Network net = load_model_for(c, d);
  AttackOptions opt;
  opt.eps = c.eps;
  opt.pgd.steps = a.steps;
  opt.pgd.restarts = a.restarts;
  if (a.step_size) opt.pgd.step_size = *a.step_size;
  opt.pgd.loss = parse_loss(a.loss);
  opt.seed = c.seed;
  opt.threads = c.threads;
  const auto rows = attack_dataset(net, d, opt);
  const AttackSummary s = summarize(rows, c.eps);
  const fs::path out = c.out;
  write_file_atomic(out / "attack.csv", attack_rows_csv(rows));
  write_file_atomic(out / "attack_summary.csv", attack_summary_csv(s));
  std::cout << "eps " << s.eps << " test_error " << s.test_error << " fgsm_error " << s.fgsm_error << " pgd_error "
            << s.pgd_error << " robust_error_bound " << s.robust_error_bound << "\n"
            << "certified but attacked: " << s.certified_but_attacked << "\n";
  return s.certified_but_attacked == 0 ? 0 : 1;
}

int cmd_eval(const Common& c) {
  const Dataset d = load_data(c);
  const Network net = load_model_for(c, d);
  const auto idx = all_indices(d);
  const RobustLossReport r = robust_loss(net, d, idx, c.eps, LossKind::CrossEntropy, c.q(), c.threads);
  const json j = {{"n", d.size()},
                  {"eps", c.eps},
                  {"norm", c.norm},
                  {"clean_err", r.clean_error_rate()},
                  {"clean_loss", r.clean_loss},
                  {"robust_err_bound", r.robust_error_rate()},
                  {"robust_loss", r.loss}};
  write_json(fs::path(c.out) / "eval.json", j);
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_oracle_check(const Common& c) {
  if (c.q() != DualNorm::L1) throw InvalidArgument("the LP oracle supports the linf ball only");
  const Dataset d = load_data(c);
  const Network net = load_model_for(c, d);
  const auto rows = tightness_report(net, d, c.eps, c.threads);
  write_file_atomic(fs::path(c.out) / "tightness.csv", tightness_csv(rows));
  double worst = 0.0, mean = 0.0;
  for (const auto& r : rows) {
    worst = std::min(worst, r.gap);
    mean += r.gap / static_cast<double>(rows.size());
  }
  std::cout << "rows " << rows.size() << " mean_gap " << mean << " min_gap " << worst << "\n";
  return 0;
}

struct PointOpts {
  std::string x;
  std::size_t index = 0;
  std::string random_net;
  int grid = 201;
  int directions = 360;
};

// The network and input point for polytope/bounds-check: from --model and
// --data/--index, or a random network (--random-net) with --x.
std::pair<Network, Vector> network_and_point(const Common& c, const PointOpts& p) {
  std::optional<Network> net;
  if (!p.random_net.empty()) {
    std::vector<Eigen::Index> widths;
    for (double w : parse_list(p.random_net)) widths.push_back(static_cast<Eigen::Index>(w));
    Rng rng = substream(c.seed, "init");
    net = init_mlp(widths, rng, InitLaw::GaussianBias);
  } else if (!c.model.empty()) {
    net = load_network(c.model);
  } else {
    throw InvalidArgument("need --model or --random-net");
  }
  Vector x;
  if (!p.x.empty()) {
    const auto v = parse_list(p.x);
    x = Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
  } else if (!c.data.empty()) {
    const Dataset d = load_data(c);
    if (p.index >= d.size()) throw InvalidArgument("--index out of range");
    x = d.example(p.index);
  } else {
    throw InvalidArgument("need --x or --data");
  }
  if (x.size() != net->input_dim()) throw DimensionError("point length != network input_dim", 0);
  return {std::move(*net), std::move(x)};
}

int cmd_polytope(const Common& c, const PointOpts& p) {
  const auto [net, x] = network_and_point(c, p);
  if (c.q() != DualNorm::L1) throw InvalidArgument("polytope sampling covers the linf ball only");
  const PolytopeSample s = sample_polytope(net, x, c.eps, p.grid, c.threads);
  const OuterBound o = outer_bound_2d(net, x, c.eps, p.directions);
  std::ostringstream csv;
  csv << "kind,order,z0,z1\n";
  for (Eigen::Index i = 0; i < s.outputs.rows(); ++i)
    csv << "sample," << i << ',' << format_double(s.outputs(i, 0)) << ',' << format_double(s.outputs(i, 1)) << '\n';
  for (std::size_t i = 0; i < s.hull.size(); ++i)
    csv << "hull," << i << ',' << format_double(s.hull[i](0)) << ',' << format_double(s.hull[i](1)) << '\n';
  for (std::size_t i = 0; i < o.polygon.size(); ++i)
    csv << "outer," << i << ',' << format_double(o.polygon[i](0)) << ',' << format_double(o.polygon[i](1)) << '\n';
  json dirs = json::array();
  for (Eigen::Index i = 0; i < o.directions.cols(); ++i) dirs.push_back({o.directions(0, i), o.directions(1, i)});
  const json j = {{"eps", c.eps},
                  {"x", std::vector<double>(x.data(), x.data() + x.size())},
                  {"box",
                   {{"lower", std::vector<double>(o.lower.data(), o.lower.data() + 2)},
                    {"upper", std::vector<double>(o.upper.data(), o.upper.data() + 2)}}},
                  {"directions", dirs},
                  {"offsets", std::vector<double>(o.offsets.data(), o.offsets.data() + o.offsets.size())},
                  {"hull_area", s.hull_area},
                  {"outer_area", o.area}};
  const fs::path out = c.out;
  write_file_atomic(out / "polytope.csv", csv.str());
  write_json(out / "outer_bound.json", j);
  std::cout << "samples " << s.outputs.rows() << " hull_area " << s.hull_area << " outer_area " << o.area << "\n";
  return 0;
}

json vec_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

int cmd_bounds_check(const Common& c, const PointOpts& p) {
  const auto [net, x] = network_and_point(c, p);
  const PreActBounds b = compute_bounds(net, x, c.eps, c.q());
  const PreActBounds nb = naive_layerwise_bounds(net, x, c.eps, c.q());
  const auto fr = index_set_stats(b);
  json layers = json::array();
  for (std::size_t t = 0; t < net.depth(); ++t) {
    json l = {{"layer", t},
              {"lower", vec_json(b.lower[t])},
              {"upper", vec_json(b.upper[t])},
              {"naive_lower", vec_json(nb.lower[t])},
              {"naive_upper", vec_json(nb.upper[t])}};
    if (t < b.partition.size()) {
      l["neg"] = b.partition[t].neg;
      l["pos"] = b.partition[t].pos;
      l["span"] = b.partition[t].span;
      l["frac_neg"] = fr[t].neg;
      l["frac_pos"] = fr[t].pos;
      l["frac_span"] = fr[t].span;
    }
    layers.push_back(std::move(l));
  }
  const json j = {{"eps", c.eps}, {"norm", c.norm}, {"index", p.index}, {"layers", layers}};
  const fs::path out = c.out;
  write_json(out / "bounds.json", j);

  std::ostringstream csv;
  csv << "example,layer,frac_neg,frac_pos,frac_span\n";
  std::vector<Vector> points{x};
  if (p.x.empty() && !c.data.empty()) {
    const Dataset d = load_data(c);
    points.clear();
    for (std::size_t i = 0; i < d.size(); ++i) points.push_back(d.example(i));
  }
  std::vector<std::vector<IndexSetFractions>> per(points.size());
  parallel_for(points.size(), c.threads, [&](std::size_t i) {
    per[i] = index_set_stats(compute_bounds(net, points[i], c.eps, c.q()));
  });
  for (std::size_t i = 0; i < per.size(); ++i)
    for (std::size_t t = 0; t < per[i].size(); ++t)
      csv << i << ',' << t << ',' << format_double(per[i][t].neg) << ',' << format_double(per[i][t].pos) << ','
          << format_double(per[i][t].span) << '\n';
  write_file_atomic(out / "index_sets.csv", csv.str());
  for (std::size_t t = 0; t < fr.size(); ++t)
    std::cout << "layer " << t << " neg " << fr[t].neg << " pos " << fr[t].pos << " span " << fr[t].span << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

int dispatch(std::vector<std::string> args, int depth);

int cmd_run(const std::string& manifest, int depth) {
  if (depth > 0) throw InvalidArgument("manifests cannot nest");
  json m;
  try {
    m = json::parse(read_file(manifest));
  } catch (const json::parse_error& e) {
    throw FormatError(manifest + ": " + e.what());
  }
  if (!m.contains("steps") || !m["steps"].is_array()) throw FormatError(manifest + ": expected {\"steps\": [...]}");
  std::size_t k = 0;
  for (const auto& step : m["steps"]) {
    if (!step.contains("command") || !step["command"].is_string())
      throw FormatError(manifest + ": step " + std::to_string(k) + " has no command");
    std::vector<std::string> args{step["command"].get<std::string>()};
    if (step.contains("args")) {
      for (const auto& [key, val] : step["args"].items()) {
        if (val.is_boolean()) {
          if (val.get<bool>()) args.push_back("--" + key);
          continue;
        }
        args.push_back("--" + key);
        args.push_back(val.is_string() ? val.get<std::string>() : val.dump());
      }
    }
    std::cout << "[step " << k << "] " << args.front() << "\n";
    const int rc = dispatch(args, depth + 1);
    if (rc != 0) return rc;
    ++k;
  }
  return 0;
}

int dispatch(std::vector<std::string> args, int depth) {
  CLI::App app{"Certified robust training and verification of ReLU networks", "robustcert"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every command");
  Common c;

  GenDataOpts g;
  auto* gen = app.add_subcommand("gen-data", "Generate the 2D toy dataset or convert an IDX pair to CSV");
  gen->add_option("--kind", g.kind, "2d or idx")->check(CLI::IsMember({"2d", "idx"}));
  gen->add_option("--n", g.n, "Number of 2D points");
  gen->add_option("--min-sep", g.min_sep, "Minimum linf distance between 2D points");
  gen->add_option("--images", g.images, "IDX image file (idx kind)");
  gen->add_option("--labels", g.labels, "IDX label file (idx kind)");
  gen->add_option("--seed", c.seed, "Seed");
  gen->add_option("--limit", c.limit, "Keep only the first N examples (idx kind)");
  gen->add_option("--out", c.out, "Output CSV path")->required();
  gen->footer(kGenDataSchema);

  TrainOpts t;
  auto* tr = app.add_subcommand("train", "Robust (default) or standard training");
  add_data(tr, c);
  add_eps(tr, c);
  add_run(tr, c);
  tr->add_option("--arch", t.arch, "mlp or conv (two stride-2 conv layers, 16 and 32 channels)")
      ->check(CLI::IsMember({"mlp", "conv"}));
  tr->add_option("--hidden", t.hidden, "Hidden widths of the mlp, comma separated");
  tr->add_option("--dense-hidden", t.dense_hidden, "Width of the dense hidden layer of the conv arch");
  tr->add_option("--kernel", t.kernel, "Conv kernel size");
  tr->add_option("--pad", t.pad, "Conv padding");
  tr->add_option("--init", t.init, "zero_bias or gaussian_bias (N(0,1) biases)")->check(CLI::IsMember({"zero_bias", "gaussian_bias"}));
  tr->add_option("--init-model", t.init_model, "Start from this model instead")->check(CLI::ExistingFile);
  tr->add_option("--epochs", t.epochs, "Epochs (full-batch: steps)")->check(CLI::PositiveNumber);
  tr->add_option("--batch-size", t.batch_size, "Minibatch size; 0 = full batch");
  tr->add_option("--lr", t.lr, "Learning rate")->check(CLI::PositiveNumber);
  tr->add_option("--optimizer", t.optimizer, "adam or sgd")->check(CLI::IsMember({"adam", "sgd"}));
  tr->add_option("--loss", t.loss, "cross_entropy or multiclass_hinge")
      ->check(CLI::IsMember({"cross_entropy", "ce", "multiclass_hinge", "hinge"}));
  tr->add_option("--eps-start", t.eps_start, "First epsilon of the linear ramp");
  tr->add_option("--ramp-epochs", t.ramp_epochs, "Epochs over which epsilon ramps to --eps");
  tr->add_flag("--standard", t.standard, "Minimize the clean loss instead");
  tr->add_flag("--stop-when-certified", t.stop_when_certified,
               "Full-batch only: stop once every training example is certified");
  tr->add_option("--checkpoint-every", t.checkpoint_every, "Save the model every N epochs (0 = never)");
  tr->add_flag("--no-track-robust", t.no_track_robust, "Standard training: skip the robust bound per batch");
  tr->footer(kTrainSchema);

  CertifyOpts co;
  auto* ce = app.add_subcommand("certify", "Certify each example at its label");
  add_model(ce, c);
  add_data(ce, c);
  add_eps(ce, c);
  add_run(ce, c);
  ce->add_flag("--max-eps", co.max_eps, "Also find the largest certified radius per example (Newton)");
  ce->add_option("--newton-tol", co.tol, "Relative tolerance of the radius search")->check(CLI::PositiveNumber);
  ce->add_option("--max-eps-cap", co.max_eps_cap, "Upper limit of the radius search")->check(CLI::PositiveNumber);
  ce->footer(kCertifySchema);

  AttackOpts ao;
  auto* at = app.add_subcommand("attack", "FGSM and PGD attacks, compared with certificates");
  add_model(at, c);
  add_data(at, c);
  add_eps(at, c);
  add_run(at, c);
  at->add_option("--steps", ao.steps, "PGD steps")->check(CLI::PositiveNumber);
  at->add_option("--restarts", ao.restarts, "PGD random restarts")->check(CLI::PositiveNumber);
  at->add_option("--step-size", ao.step_size, "PGD step size (default eps/10)");
  at->add_option("--loss", ao.loss, "Attack loss")->check(CLI::IsMember({"cross_entropy", "ce", "multiclass_hinge", "hinge"}));
  at->footer(kAttackSchema);

  auto* ev = app.add_subcommand("eval", "Clean and robust loss and error");
  add_model(ev, c);
  add_data(ev, c);
  add_eps(ev, c);
  add_run(ev, c);
  ev->footer(kEvalSchema);

  auto* oc = app.add_subcommand("oracle-check", "Dual bound against the exact LP optimum");
  add_model(oc, c);
  add_data(oc, c);
  add_eps(oc, c);
  add_run(oc, c);
  oc->footer(kOracleSchema);

  PointOpts po;
  auto add_point = [&](CLI::App* s) {
    s->add_option("--model", c.model, "Model JSON")->check(CLI::ExistingFile);
    s->add_option("--random-net", po.random_net, "Widths of a random network, e.g. 2,50,50,2 (seeded by --seed)");
    add_data(s, c, false);
    s->add_option("--index", po.index, "Example index in --data");
    s->add_option("--x", po.x, "Input point, comma separated");
    add_eps(s, c);
    add_run(s, c);
  };
  auto* pt = app.add_subcommand("polytope", "Sample the reachable set and its outer bound (2-output networks)");
  add_point(pt);
  pt->add_option("--grid", po.grid, "Grid points per input coordinate");
  pt->add_option("--directions", po.directions, "Number of cutting directions");
  pt->footer(kPolytopeSchema);

  auto* bc = app.add_subcommand("bounds-check", "Per-layer activation bounds and index sets");
  add_point(bc);
  bc->footer(kBoundsSchema);

  std::string manifest;
  auto* run = app.add_subcommand("run", "Replay an experiment from a manifest");
  run->add_option("--manifest", manifest, "Manifest JSON")->required()->check(CLI::ExistingFile);
  run->footer(kManifestSchema);

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) return cmd_gen_data(c, g);
    if (*tr) return cmd_train(c, t);
    if (*ce) return cmd_certify(c, co);
    if (*at) return cmd_attack(c, ao);
    if (*ev) return cmd_eval(c);
    if (*oc) return cmd_oracle_check(c);
    if (*pt) return cmd_polytope(c, po);
    if (*bc) return cmd_bounds_check(c, po);
    if (*run) return cmd_run(manifest, depth);
  } catch (const DimensionError& e) {
    json err = {{"error", "dimension"}, {"message", e.what()}};
    if (e.layer() >= 0) err["layer"] = e.layer();
    std::cerr << err.dump() << "\n";
    return 3;
  } catch (const FormatError& e) {
    std::cerr << json{{"error", "format"}, {"message", e.what()}}.dump() << "\n";
    return 4;
  } catch (const InvalidArgument& e) {
    std::cerr << json{{"error", "invalid_argument"}, {"message", e.what()}}.dump() << "\n";
    return 5;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "runtime"}, {"message", e.what()}}.dump() << "\n";
    return 6;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dispatch(std::move(args), 0);
}
