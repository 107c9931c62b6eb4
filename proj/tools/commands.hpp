#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mhex/mhex.hpp"

namespace mhex::cli {

namespace fs = std::filesystem;

/// Everything a run depends on. Serializes to canonical key=value text; a run
/// re-executed from that text produces the same artifacts.
struct RunConfig {
  std::string command = "train";
  std::string dataset = "shapes";
  std::size_t n_train = 2000;
  std::size_t n_eval = 200;
  std::size_t vocab = 64;
  std::string mode = "finetune";
  int epochs = 6;
  double lr = 1e-3;
  std::size_t batch = 32;
  std::uint64_t seed = 1;
  std::size_t workers = 1;
  double alpha = 0.25;
  std::string ss = "auto";  // or a number in [0, 1]
  double decay = 0.9;
  std::size_t layers = 3;
  std::size_t grid = 7;
  std::size_t site = 0;
  std::size_t steps = 20;
  double top_frac = 0.10;
  std::string out = "mhex_out";
  std::string checkpoint;  // empty: <out>/checkpoint.mhex
  std::string samples = "0,1,2,3";
  int class_id = -1;  // -1: true label
  bool grad_cam = false;
  bool oracle_explainer = false;
  double force_area = -1.0;  // < 0: measured area
  std::size_t entropy_samples = 1000000;
  std::size_t bins = 200;

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("command", command);
    kv.set("dataset", dataset);
    kv.set("n_train", n_train);
    kv.set("n_eval", n_eval);
    kv.set("vocab", vocab);
    kv.set("mode", mode);
    kv.set("epochs", epochs);
    kv.set("lr", lr);
    kv.set("batch", batch);
    kv.set("seed", seed);
    kv.set("workers", workers);
    kv.set("alpha", alpha);
    kv.set("ss", ss);
    kv.set("decay", decay);
    kv.set("layers", layers);
    kv.set("grid", grid);
    kv.set("site", site);
    kv.set("steps", steps);
    kv.set("top_frac", top_frac);
    kv.set("out", out);
    kv.set("checkpoint", checkpoint);
    kv.set("samples", samples);
    kv.set("class", class_id);
    kv.set("grad_cam", grad_cam);
    kv.set("oracle_explainer", oracle_explainer);
    kv.set("force_area", force_area);
    kv.set("entropy_samples", entropy_samples);
    kv.set("bins", bins);
    return kv;
  }

  /// Overlays every key present in `kv`; unknown keys are rejected.
  void merge(const KeyValues& kv) {
    static const std::vector<std::string> known = {
        "command", "dataset", "n_train", "n_eval", "vocab", "mode", "epochs", "lr", "batch", "seed",
        "workers", "alpha", "ss", "decay", "layers", "grid", "site", "steps", "top_frac", "out",
        "checkpoint", "samples", "class", "grad_cam", "oracle_explainer", "force_area", "entropy_samples", "bins"};
    for (const auto& [k, v] : kv.entries())
      if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown config key '" + k + "'");
    auto str = [&](const char* k, std::string& f) { if (kv.has(k)) f = kv.get(k); };
    auto uns = [&](const char* k, auto& f) { if (kv.has(k)) f = static_cast<std::remove_reference_t<decltype(f)>>(kv.get_uint(k)); };
    auto dbl = [&](const char* k, double& f) { if (kv.has(k)) f = kv.get_double(k); };
    auto bln = [&](const char* k, bool& f) { if (kv.has(k)) f = kv.get_bool(k); };
    str("command", command);
    str("dataset", dataset);
    uns("n_train", n_train);
    uns("n_eval", n_eval);
    uns("vocab", vocab);
    str("mode", mode);
    if (kv.has("epochs")) epochs = static_cast<int>(kv.get_double("epochs"));
    dbl("lr", lr);
    uns("batch", batch);
    uns("seed", seed);
    uns("workers", workers);
    dbl("alpha", alpha);
    str("ss", ss);
    dbl("decay", decay);
    uns("layers", layers);
    uns("grid", grid);
    uns("site", site);
    uns("steps", steps);
    dbl("top_frac", top_frac);
    str("out", out);
    str("checkpoint", checkpoint);
    str("samples", samples);
    if (kv.has("class")) class_id = static_cast<int>(kv.get_double("class"));
    bln("grad_cam", grad_cam);
    bln("oracle_explainer", oracle_explainer);
    dbl("force_area", force_area);
    uns("entropy_samples", entropy_samples);
    uns("bins", bins);
  }

  void validate() const {
    if (dataset != "shapes" && dataset != "tokens") throw ConfigError("--dataset must be shapes or tokens");
    parse_loss_mode(mode);
    if (epochs < 0) throw ConfigError("--epochs must be >= 0");
    if (n_train == 0 || n_eval == 0) throw ConfigError("dataset sizes must be >= 1");
    if (workers == 0) throw ConfigError("--workers must be >= 1");
    if (!(top_frac >= 0.0 && top_frac <= 1.0)) throw ConfigError("--top-frac must lie in [0, 1]");
    if (force_area >= 0.0 && force_area > 1.0) throw ConfigError("--force-area must lie in [0, 1]");
    filter().validate();
  }

  WeightFilterConfig filter() const {
    WeightFilterConfig f;
    f.neg_mix = alpha;
    if (ss != "auto") {
      try {
        f.ss_threshold = std::stod(ss);
      } catch (const std::logic_error&) {
        throw ConfigError("--ss must be 'auto' or a number, got '" + ss + "'");
      }
    }
    f.layer_decay = decay;
    f.layers = layers;
    return f;
  }

  std::string checkpoint_path() const { return checkpoint.empty() ? (fs::path(out) / "checkpoint.mhex").string() : checkpoint; }

  std::vector<std::size_t> sample_ids() const {
    KeyValues kv;
    kv.set("samples", samples);
    return kv.get_list("samples");
  }

  std::uint64_t eval_seed() const { return seed + 7919; }
};

// ------------------------------------------------------------------ data

struct Split {
  std::vector<ShapeSample> shapes;
  std::vector<TokenSample> tokens;
  std::vector<Example> examples;
};

inline Split make_split(const RunConfig& rc, std::size_t n, std::uint64_t seed) {
  Split s;
  if (rc.dataset == "shapes") {
    s.shapes = gen_shapes(n, seed);
    s.examples = to_examples(s.shapes);
  } else {
    s.tokens = gen_tokens(n, rc.vocab, seed);
    s.examples = to_examples(s.tokens);
  }
  return s;
}

inline std::unique_ptr<Model> fresh_model(const RunConfig& rc) {
  if (rc.dataset == "shapes") {
    ResNetConfig c;
    c.seed = rc.seed;
    return build_resnet(c);
  }
  TransformerConfig c;
  c.vocab_size = rc.vocab;
  c.seed = rc.seed;
  c.saliency_layers = std::min(rc.layers, c.n_layers);
  return build_transformer(c);
}

// ------------------------------------------------------------------ output

/// Collects written artifacts; the single writer of the output directory.
class Output {
 public:
  explicit Output(const RunConfig& rc) : dir_(rc.out) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create output directory '" + dir_.string() + "': " + ec.message());
  }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  void text(const std::string& name, const std::string& content, const std::string& sample = "",
            const std::string& method = "") {
    write_text(path(name), content);
    add(name, sample, method);
  }

  void add(const std::string& name, const std::string& sample = "", const std::string& method = "") {
    rows_.push_back(sample + "," + method + "," + name);
  }

  /// Writes config_<command>.txt and manifest_<command>.csv.
  void finish(const RunConfig& rc) {
    text("config_" + rc.command + ".txt", rc.to_kv().to_text());
    std::string m = "sample,method,file\n";
    for (const auto& r : rows_) m += r + "\n";
    write_text(path("manifest_" + rc.command + ".csv"), m);
  }

 private:
  fs::path dir_;
  std::vector<std::string> rows_;
};

/// Runs fn(i, model) for i in [0, n) over `workers` threads, each with its own
/// model replica. Results must be stored by index.
template <typename Fn>
void parallel_samples(std::size_t n, std::size_t workers, const Model& model, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i, model);
    return;
  }
  std::vector<std::unique_ptr<Model>> replicas;
  for (std::size_t w = 0; w < workers; ++w) replicas.push_back(model.clone());
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w)
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i, *replicas[w]);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

// ------------------------------------------------------------------ train

inline int cmd_train(const RunConfig& rc, std::ostream& log = std::cout) {
  rc.validate();
  Output out(rc);
  const Split data = make_split(rc, rc.n_train, rc.seed);
  auto model = fresh_model(rc);
  TrainOptions opt;
  opt.mode = parse_loss_mode(rc.mode);
  opt.epochs = rc.epochs;
  opt.lr = rc.lr;
  opt.batch_size = rc.batch;
  opt.seed = rc.seed;
  opt.workers = rc.workers;
  opt.on_epoch = [&](int e, const Model&) { log << "epoch " << e << "/" << rc.epochs << " done\n" << std::flush; };
  const TrainLog tl = train(*model, data.examples, opt);
  save_checkpoint(*model, rc.checkpoint_path());
  out.add(rc.checkpoint_path());
  out.text("train_log.csv", tl.to_csv());
  const auto& last = tl.epochs.back();
  log << "final loss " << last.loss << ", final-head training accuracy " << last.head_accuracy.back() << "\n";
  out.finish(rc);
  return 0;
}

// ------------------------------------------------------------------ explain

inline std::unique_ptr<Model> load_for(const RunConfig& rc) {
  auto m = load_checkpoint(rc.checkpoint_path());
  const bool img = rc.dataset == "shapes";
  if (img != (m->kind() == HostKind::resnet))
    throw ConfigError("checkpoint host does not match --dataset " + rc.dataset);
  return m;
}

inline std::vector<std::string> token_words(const TokenSeq& seq) {
  std::vector<std::string> w;
  for (auto j : valid_positions(seq)) w.push_back("t" + std::to_string(seq.ids[j]));
  return w;
}

inline std::vector<int> valid_ids(const TokenSeq& seq) {
  std::vector<int> v;
  for (auto j : valid_positions(seq)) v.push_back(seq.ids[j]);
  return v;
}

inline int cmd_explain(const RunConfig& rc, std::ostream& log = std::cout) {
  rc.validate();
  auto model = load_for(rc);
  const Split data = make_split(rc, rc.n_eval, rc.eval_seed());
  const auto ids = rc.sample_ids();
  for (auto id : ids)
    if (id >= data.examples.size())
      throw IndexError("unknown sample id " + std::to_string(id) + " (evaluation split has " +
                       std::to_string(data.examples.size()) + " samples)");
  Output out(rc);
  const WeightFilterConfig cfg = rc.filter();
  for (auto id : ids) {
    const Example& ex = data.examples[id];
    const int cls = rc.class_id >= 0 ? rc.class_id : ex.label;
    const std::string sid = std::to_string(id);
    const ForwardRecord rec = model->forward_collect(ex.input);
    if (const auto* img = std::get_if<Image>(&ex.input)) {
      const SaliencyMap m = explain_image(*model, rec, cls, cfg);
      render_heatmap(m.normalized, out.path("sample_" + sid + "_mhex.pgm"));
      out.add("sample_" + sid + "_mhex.pgm", sid, "mhex");
      render_heatmap(m.normalized, out.path("sample_" + sid + "_mhex_overlay.ppm"), img);
      out.add("sample_" + sid + "_mhex_overlay.ppm", sid, "mhex_overlay");
      if (rc.grad_cam) {
        const SaliencyMap g = gradcam_baseline(*model, ex.input, cls);
        render_heatmap(g.normalized, out.path("sample_" + sid + "_gradcam.pgm"));
        out.add("sample_" + sid + "_gradcam.pgm", sid, "gradcam");
      }
    } else {
      const auto& seq = std::get<TokenSeq>(ex.input);
      const TokenSaliency ts = explain_tokens(*model, rec, cls, cfg);
      const auto v = valid_ids(seq);
      out.text("sample_" + sid + "_mhex.csv", token_saliency_csv(ts, v), sid, "mhex");
      const auto words = token_words(seq);
      out.text("sample_" + sid + "_mhex.html", token_saliency_html(ts, words), sid, "mhex_html");
    }
  }
  out.finish(rc);
  log << "explained " << ids.size() << " samples into " << rc.out << "\n";
  return 0;
}

// ------------------------------------------------------------------ evaluate

struct MethodStats {
  std::vector<DropRecord> hard, soft;
  std::vector<double> ins_auc, del_auc, localization;
};

inline Grid truth_grid(const ShapeSample& s) {
  Grid g(s.image.height, s.image.width);
  for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] = s.truth_mask[i];
  return g;
}

/// Pixels of `map` in a seeded random order: same value histogram, hence the
/// same binarized area, with no spatial structure.
inline Grid permuted_map(const Grid& map, std::uint64_t seed, std::size_t index) {
  Grid g = map;
  CounterRng rng(seed, 0x524E444DULL + index);
  for (std::size_t i = g.v.size(); i > 1; --i) std::swap(g.v[i - 1], g.v[rng.below(i)]);
  return g;
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline int evaluate_images(const RunConfig& rc, const Model& model, const Split& data, Output& out, std::ostream& log) {
  std::vector<std::string> methods = {"mhex", "random"};
  if (rc.grad_cam) methods.push_back("gradcam");
  if (rc.oracle_explainer) methods.push_back("oracle");
  const WeightFilterConfig cfg = rc.filter();
  const std::size_t n = data.examples.size();
  // per-sample, per-method results stored by index, merged by one writer
  struct Row {
    DropRecord hard, soft;
    double ins = 0, del = 0, loc = 0;
  };
  std::vector<std::vector<Row>> rows(methods.size(), std::vector<Row>(n));
  parallel_samples(n, rc.workers, model, [&](std::size_t i, const Model& m) {
    const ShapeSample& s = data.shapes[i];
    const Classifier clf = model_classifier(m);
    const ForwardRecord rec = m.forward_collect(s.image);
    const double p0 = softmax(rec.final_logits.data()).at(static_cast<std::size_t>(s.label));
    const Grid mhex_map = explain_image(m, rec, s.label, cfg).normalized;
    for (std::size_t k = 0; k < methods.size(); ++k) {
      Grid map;
      if (methods[k] == "mhex") map = mhex_map;
      else if (methods[k] == "random") map = permuted_map(mhex_map, rc.seed, i);
      else if (methods[k] == "gradcam") map = gradcam_baseline(m, s.image, s.label).normalized;
      else map = truth_grid(s);
      const std::string id = std::to_string(i);
      const double area = rc.force_area >= 0.0 ? rc.force_area : saliency_area(map);
      const double ph = clf(hard_mask(s.image, map))[static_cast<std::size_t>(s.label)];
      const double ps = clf(soft_mask(s.image, map))[static_cast<std::size_t>(s.label)];
      Row& r = rows[k][i];
      r.hard = make_drop_record(id, p0, ph, area);
      r.soft = make_drop_record(id, p0, ps, area);
      r.ins = auc(insertion_curve(clf, s.image, map, s.label, rc.steps));
      r.del = auc(deletion_curve(clf, s.image, map, s.label, rc.steps));
      r.loc = localization_score(map.v, s.truth_mask);
    }
  });
  std::string summary = "method,n,avg_drop,sad,ead,insertion_auc,deletion_auc,localization,excluded\n";
  for (std::size_t k = 0; k < methods.size(); ++k) {
    MethodStats st;
    std::string curves = "id,insertion_auc,deletion_auc,localization\n";
    for (std::size_t i = 0; i < n; ++i) {
      const Row& r = rows[k][i];
      st.hard.push_back(r.hard);
      st.soft.push_back(r.soft);
      st.ins_auc.push_back(r.ins);
      st.del_auc.push_back(r.del);
      st.localization.push_back(r.loc);
      curves += std::to_string(i) + "," + fmt(r.ins) + "," + fmt(r.del) + "," + fmt(r.loc) + "\n";
    }
    std::size_t excluded = 0;
    const double ad = avg_drop(st.hard, &excluded);
    const double sad = avg_drop(st.soft);
    const double e = ead(st.hard);
    out.text("drops_" + methods[k] + ".csv", drop_records_csv(st.hard), "", methods[k]);
    out.text("sad_" + methods[k] + ".csv", drop_records_csv(st.soft), "", methods[k]);
    out.text("curves_" + methods[k] + ".csv", curves, "", methods[k]);
    summary += methods[k] + "," + std::to_string(n) + "," + fmt(ad) + "," + fmt(sad) + "," + fmt(e) + "," +
               fmt(mean_of(st.ins_auc)) + "," + fmt(mean_of(st.del_auc)) + "," + fmt(mean_of(st.localization)) + "," +
               std::to_string(excluded) + "\n";
    if (excluded) log << "warning: " << excluded << " samples with p_orig = 0 excluded from AVG Drop (" << methods[k] << ")\n";
  }
  out.text("summary.csv", summary);
  log << summary;
  return 0;
}

inline int evaluate_tokens(const RunConfig& rc, const Model& model, const Split& data, Output& out, std::ostream& log) {
  std::vector<std::string> methods = {"mhex"};
  if (rc.oracle_explainer) methods.push_back("oracle");
  const WeightFilterConfig cfg = rc.filter();
  const std::size_t n = data.examples.size();
  std::vector<std::vector<DropRecord>> recs(methods.size(), std::vector<DropRecord>(n));
  std::vector<std::vector<double>> loc(methods.size(), std::vector<double>(n));
  parallel_samples(n, rc.workers, model, [&](std::size_t i, const Model& m) {
    const TokenSample& s = data.tokens[i];
    const Classifier clf = model_classifier(m);
    const auto valid = valid_positions(s.tokens);
    std::vector<std::uint8_t> truth;
    for (auto j : valid) truth.push_back(s.truth_mask[j]);
    for (std::size_t k = 0; k < methods.size(); ++k) {
      std::vector<double> scores;
      if (methods[k] == "mhex") {
        scores = explain_tokens(m, m.forward_collect(s.tokens), s.label, cfg).scores;
      } else {
        for (auto t : truth) scores.push_back(t);
      }
      recs[k][i] = token_perturb_drop(clf, s.tokens, scores, s.label, rc.top_frac, kMaskToken, std::to_string(i));
      if (rc.force_area >= 0.0) recs[k][i].area = rc.force_area;
      Grid g(1, scores.size());
      g.v = scores;
      loc[k][i] = localization_score(normalize(g).v, truth);
    }
  });
  std::string summary = "method,n,avg_drop,ead,localization,excluded\n";
  for (std::size_t k = 0; k < methods.size(); ++k) {
    std::size_t excluded = 0;
    const double ad = avg_drop(recs[k], &excluded);
    out.text("token_drops_" + methods[k] + ".csv", drop_records_csv(recs[k]), "", methods[k]);
    summary += methods[k] + "," + std::to_string(n) + "," + fmt(ad) + "," + fmt(ead(recs[k])) + "," +
               fmt(mean_of(loc[k])) + "," + std::to_string(excluded) + "\n";
  }
  out.text("summary.csv", summary);
  log << summary;
  return 0;
}

inline int cmd_evaluate(const RunConfig& rc, std::ostream& log = std::cout) {
  rc.validate();
  auto model = load_for(rc);
  const Split data = make_split(rc, rc.n_eval, rc.eval_seed());
  Output out(rc);
  const int code = rc.dataset == "shapes" ? evaluate_images(rc, *model, data, out, log)
                                          : evaluate_tokens(rc, *model, data, out, log);
  out.finish(rc);
  return code;
}

// ------------------------------------------------------------------ analyze

inline int cmd_analyze(const RunConfig& rc, std::ostream& log = std::cout) {
  rc.validate();
  Output out(rc);
  if (rc.dataset == "shapes") {
    auto model = load_for(rc);
    const Split data = make_split(rc, rc.n_eval, rc.eval_seed());
    const TriangleReport rep = correlation_triangle(*model, data.examples, rc.filter());
    out.text("correlation_triangle.csv", rep.csv());
    out.text("collaboration_records.csv", rep.records_csv());
    for (auto id : rc.sample_ids()) {
      if (id >= data.examples.size()) throw IndexError("unknown sample id " + std::to_string(id));
      const Example& ex = data.examples[id];
      const Grid q = blockwise_quality(*model, ex.input, ex.label, rc.grid, rc.site);
      std::string csv = "row,col,cosine\n";
      Grid shown(q.h, q.w);
      for (std::size_t y = 0; y < q.h; ++y)
        for (std::size_t x = 0; x < q.w; ++x) {
          csv += std::to_string(y) + "," + std::to_string(x) + "," + fmt(q(y, x)) + "\n";
          shown(y, x) = 0.5 * (q(y, x) + 1.0);  // [-1, 1] -> [0, 1]
        }
      const std::string sid = std::to_string(id);
      out.text("block_" + sid + ".csv", csv, sid, "blockwise");
      render_heatmap(shown, out.path("block_" + sid + ".pgm"));
      out.add("block_" + sid + ".pgm", sid, "blockwise");
    }
    log << rep.csv();
  }
  const EntropyEstimate e = relu_entropy_drop(rc.entropy_samples, rc.bins, rc.seed);
  std::ostringstream es;
  es.precision(10);
  es << "delta_h=" << e.delta << "\ntarget=" << 0.5 * std::log(2.0) << "\nh_gaussian=" << e.h_gaussian
     << "\nh_discrete=" << e.h_discrete << "\nh_continuous=" << e.h_continuous << "\n";
  out.text("entropy.txt", es.str());
  log << "delta_h " << fmt(e.delta) << " (target " << fmt(0.5 * std::log(2.0)) << ")\n";
  out.finish(rc);
  return 0;
}

inline int dispatch(const RunConfig& rc, std::ostream& log = std::cout) {
  if (rc.command == "train") return cmd_train(rc, log);
  if (rc.command == "explain") return cmd_explain(rc, log);
  if (rc.command == "evaluate") return cmd_evaluate(rc, log);
  if (rc.command == "analyze") return cmd_analyze(rc, log);
  throw ConfigError("unknown command '" + rc.command + "'");
}

}  // namespace mhex::cli
