#pragma once

// Workspace-directory pipeline: each stage reads conventional filenames from
// an input directory and writes its artifacts into an output directory. The
// CLI is a thin wrapper over these functions; tests drive them directly.

#include <atomic>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "stgraph/common.hpp"
#include "stgraph/eval.hpp"
#include "stgraph/graph.hpp"
#include "stgraph/ingest.hpp"
#include "stgraph/loss.hpp"
#include "stgraph/model.hpp"
#include "stgraph/synth.hpp"
#include "stgraph/trainer.hpp"

namespace stgraph::pipeline {

namespace fs = std::filesystem;

// Conventional artifact names inside a workspace directory.
inline constexpr const char* kCheckinsFile = "checkins.csv";
inline constexpr const char* kLabelsFile = "labels.csv";
inline constexpr const char* kTrajectoriesFile = "trajectories.txt";
inline constexpr const char* kGraphsDir = "graphs";
inline constexpr const char* kGraphIndexFile = "index.txt";
inline constexpr const char* kCheckpointFile = "checkpoint.stp";
inline constexpr const char* kTrainStateFile = "train_state.stt";
inline constexpr const char* kTrainLogFile = "train_log.csv";
inline constexpr const char* kSplitFile = "split.txt";
inline constexpr const char* kEmbeddingsFile = "embeddings.csv";

/// Accepts either a workspace directory (conventional name appended) or a
/// direct file path.
inline std::string resolve_input(const std::string& path, const char* conventional) {
  if (fs::is_directory(path)) return (fs::path(path) / conventional).string();
  return path;
}

template <class Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(jobs, n); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

// ----------------------------------------------------------------------------
// Stages
// ----------------------------------------------------------------------------

inline void run_synth(const std::string& out_dir, int users_per_profile, int days,
                      std::uint64_t seed) {
  fs::create_directories(out_dir);
  SynthCorpus corpus = generate(default_profiles(), users_per_profile, days, seed);
  write_file((fs::path(out_dir) / kCheckinsFile).string(), serialize_checkins(corpus.records));
  write_file((fs::path(out_dir) / kLabelsFile).string(), serialize_labels(corpus.labels));
}

struct IngestSummary {
  std::size_t records = 0;
  std::size_t invalid = 0;
  std::size_t users = 0;
  SessionizeCounts counts;
};

inline IngestSummary run_ingest(const std::string& input, const std::string& out_dir,
                                const FormatConfig& fmt, const CategoryMap& categories) {
  fs::create_directories(out_dir);
  const std::string in_path = resolve_input(input, kCheckinsFile);
  std::ifstream in(in_path);
  if (!in) throw DataError("cannot open check-in file: " + in_path);
  ParseResult parsed = parse_checkins(in, fmt);

  IngestSummary summary;
  summary.records = parsed.records.size();
  summary.invalid = parsed.invalid_lines;
  auto histories = build_histories(parsed.records, categories, &summary.counts);
  summary.users = histories.size();
  write_file((fs::path(out_dir) / kTrajectoriesFile).string(),
             serialize_histories(histories, categories.num_classes()));
  return summary;
}

inline std::vector<UserHistory> load_trajectories(const std::string& input, int* num_classes) {
  return deserialize_histories(read_file(resolve_input(input, kTrajectoriesFile)), num_classes);
}

inline void run_build_graphs(const std::string& input, const std::string& out_dir,
                             std::size_t jobs) {
  int num_classes = 10;
  auto histories = load_trajectories(input, &num_classes);
  if (histories.empty()) throw DataError("build-graph: no users in trajectory store");
  const fs::path dir = fs::path(out_dir) / kGraphsDir;
  fs::create_directories(dir);

  std::vector<std::string> errors(histories.size());
  parallel_for(histories.size(), jobs, [&](std::size_t i) {
    try {
      MobilityGraph g = build_graph(histories[i], num_classes);
      write_file((dir / (histories[i].user_id + ".stg")).string(), serialize_graph(g));
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  for (const std::string& e : errors) {
    if (!e.empty()) throw DataError("build-graph: " + e);
  }
  std::ostringstream index;
  for (const UserHistory& h : histories) index << h.user_id << " " << h.user_id << ".stg\n";
  write_file((dir / kGraphIndexFile).string(), index.str());
}

inline std::vector<MobilityGraph> load_graphs(const std::string& input) {
  const fs::path dir = fs::is_directory(fs::path(input) / kGraphsDir)
                           ? fs::path(input) / kGraphsDir
                           : fs::path(input);
  const std::string index_path = (dir / kGraphIndexFile).string();
  std::istringstream index(read_file(index_path));
  std::vector<MobilityGraph> graphs;
  std::string line;
  while (std::getline(index, line)) {
    auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok.size() != 2) throw DataError("graph index: bad line '" + line + "'");
    graphs.push_back(deserialize_graph(read_file((dir / tok[1]).string())));
    if (graphs.back().user_id != tok[0]) {
      throw DataError("graph index: user mismatch in " + tok[1]);
    }
  }
  if (graphs.empty()) throw DataError("no graphs found under " + dir.string());
  return graphs;
}

inline GraphStats run_stats(const std::string& input, const std::string& out_dir) {
  auto graphs = load_graphs(input);
  GraphStats stats = graph_stats(graphs);
  fs::create_directories(out_dir);
  std::size_t trajectories = 0;
  // Sequence count comes from the trajectory store when present.
  try {
    int nc = 10;
    for (const auto& h : load_trajectories(input, &nc)) trajectories += h.trajectories.size();
  } catch (const DataError&) {
    trajectories = 0;
  }
  std::ostringstream summary;
  summary << "sequences," << trajectories << "\n"
          << "graphs," << stats.graph_count << "\n"
          << "edges," << stats.edge_count << "\n";
  write_file((fs::path(out_dir) / "stats_summary.csv").string(), summary.str());
  write_file((fs::path(out_dir) / "node_count_hist.csv").string(),
             histogram_table(stats.node_count_histogram, "nodes"));
  write_file((fs::path(out_dir) / "max_outdegree_hist.csv").string(),
             histogram_table(stats.max_outdegree_histogram, "max_outdegree"));
  return stats;
}

struct SplitLists {
  std::vector<std::string> train, val, test;
};

inline std::string serialize_split(const SplitLists& s) {
  std::ostringstream out;
  for (const auto& u : s.train) out << "train " << u << "\n";
  for (const auto& u : s.val) out << "val " << u << "\n";
  for (const auto& u : s.test) out << "test " << u << "\n";
  return out.str();
}

inline SplitLists parse_split(const std::string& text) {
  SplitLists s;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok.size() != 2) throw DataError("split file: bad line '" + line + "'");
    if (tok[0] == "train") s.train.push_back(tok[1]);
    else if (tok[0] == "val") s.val.push_back(tok[1]);
    else if (tok[0] == "test") s.test.push_back(tok[1]);
    else throw DataError("split file: unknown role " + tok[0]);
  }
  return s;
}

struct TrainSummary {
  std::size_t train_users = 0, val_users = 0, test_users = 0;
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
};

/// Splits graphs into train/test by the configured ratio, carves a tenth of
/// the training pool for validation-based early stopping, trains, and writes
/// checkpoint, resumable state, log, and split membership.
inline TrainSummary run_train(const std::string& input, const std::string& out_dir,
                              const TrainConfig& config) {
  auto graphs = load_graphs(input);
  auto [pool, test] = split_dataset(graphs, config.split_ratio, config.seed);
  std::vector<MobilityGraph> train_set, val_set;
  if (pool.size() >= 5) {
    auto carved = split_dataset(pool, 0.9, derive_seed(config.seed, 0xA11D));
    train_set = std::move(carved.first);
    val_set = std::move(carved.second);
  } else {
    train_set = std::move(pool);
  }

  TrainState state = make_train_state(config);
  TrainResult result = train_epochs(state, train_set, val_set, config);

  fs::create_directories(out_dir);
  SplitLists split;
  for (const auto& g : train_set) split.train.push_back(g.user_id);
  for (const auto& g : val_set) split.val.push_back(g.user_id);
  for (const auto& g : test) split.test.push_back(g.user_id);
  write_file((fs::path(out_dir) / kSplitFile).string(), serialize_split(split));
  save_checkpoint(result.params, (fs::path(out_dir) / kCheckpointFile).string());
  save_train_state(state, (fs::path(out_dir) / kTrainStateFile).string());
  write_file((fs::path(out_dir) / kTrainLogFile).string(), result.log.to_table());

  TrainSummary summary;
  summary.train_users = train_set.size();
  summary.val_users = val_set.size();
  summary.test_users = test.size();
  summary.epochs = result.log.epochs.size();
  summary.best_epoch = result.best_epoch;
  summary.best_val_loss = result.best_val_loss;
  return summary;
}

// ----------------------------------------------------------------------------
// Evaluation
// ----------------------------------------------------------------------------

struct EvalSummary {
  MetricsReport spatial, temporal, joint;
  double r_s = 0.0, r_t = 0.0, r_st = 0.0;
  std::size_t pair_count = 0;
  std::size_t metric_users = 0;  // users the prediction metrics ran on
  std::size_t corpus_users = 0;
};

namespace detail {

inline std::vector<double> sigmoid_vec(const Tensor& logits) {
  std::vector<double> out(logits.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double z = logits.value(i);
    out[i] = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
  return out;
}

inline std::vector<double> softmax_vec(const Tensor& logits) {
  std::vector<double> out(logits.numel());
  double mx = logits.value(0);
  for (std::size_t i = 0; i < out.size(); ++i) mx = std::max(mx, logits.value(i));
  double sum = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::exp(logits.value(i) - mx);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

inline std::string csv_cell(double v) {
  return std::isnan(v) ? std::string("NA") : format_real(v);
}

}  // namespace detail

/// Runs every quantitative report: per-head prediction metrics on the test
/// users (all users when no split file exists), similarity correlations,
/// diversity/regularity indexes with latent-response matrices, and
/// per-dimension embedding statistics.
inline EvalSummary run_eval(const std::string& input, const std::string& out_dir,
                            const ModelParams& params, double threshold, std::size_t bins,
                            std::size_t jobs) {
  int num_classes = 10;
  auto histories = load_trajectories(input, &num_classes);
  auto graphs = load_graphs(input);
  std::map<std::string, const UserHistory*> history_of;
  for (const auto& h : histories) history_of[h.user_id] = &h;
  for (const auto& g : graphs) {
    if (!history_of.count(g.user_id)) {
      throw DataError("eval: graph user " + g.user_id + " missing from trajectory store");
    }
  }

  // Forward passes (evaluation mode) over the whole corpus.
  const std::size_t n = graphs.size();
  std::vector<std::vector<double>> embeddings(n), prob_s(n), prob_t(n), prob_st(n);
  std::vector<DistributionTargets> targets(n);
  parallel_for(n, jobs, [&](std::size_t i) {
    NoGradGuard ng;
    ForwardState st = forward(graphs[i], params);
    embeddings[i] = st.embedding.values();
    prob_s[i] = detail::sigmoid_vec(st.phi_spatial);
    prob_t[i] = detail::sigmoid_vec(st.phi_temporal);
    prob_st[i] = detail::softmax_vec(st.phi_joint);
    targets[i] = build_targets(graphs[i]);
  });

  // Prediction metrics on the held-out users when a split is recorded.
  std::set<std::string> metric_users;
  const std::string split_path = (fs::path(input) / kSplitFile).string();
  if (fs::exists(split_path)) {
    for (const auto& u : parse_split(read_file(split_path)).test) metric_users.insert(u);
  }
  std::vector<std::size_t> eval_idx;
  for (std::size_t i = 0; i < n; ++i) {
    if (metric_users.empty() || metric_users.count(graphs[i].user_id)) eval_idx.push_back(i);
  }
  if (eval_idx.empty()) throw DataError("eval: no users to evaluate");

  auto gather = [&](const std::vector<std::vector<double>>& probs, auto take_target) {
    std::vector<std::vector<double>> p, t;
    std::vector<std::string> ids;
    for (std::size_t i : eval_idx) {
      p.push_back(probs[i]);
      t.push_back(take_target(targets[i]));
      ids.push_back(graphs[i].user_id);
    }
    return std::tuple(p, t, ids);
  };

  EvalSummary summary;
  const double joint_tau = 1.0 / static_cast<double>(num_classes * kNumTimeBins);
  {
    auto [p, t, ids] = gather(prob_s, [](const DistributionTargets& x) { return x.spatial; });
    summary.spatial = multilabel_metrics(p, t, threshold, &ids);
  }
  {
    auto [p, t, ids] = gather(prob_t, [](const DistributionTargets& x) { return x.temporal; });
    summary.temporal = multilabel_metrics(p, t, threshold, &ids);
  }
  {
    auto [p, t, ids] = gather(prob_st, [](const DistributionTargets& x) { return x.joint; });
    summary.joint = multilabel_metrics(p, t, joint_tau, &ids);
  }
  summary.metric_users = eval_idx.size();
  summary.corpus_users = n;

  // Similarity correlations over all unordered pairs of the whole corpus.
  std::vector<std::vector<double>> freq_s(n), freq_t(n), freq_st(n);
  for (std::size_t i = 0; i < n; ++i) {
    const UserHistory& h = *history_of.at(graphs[i].user_id);
    freq_s[i] = category_frequencies(h, num_classes);
    freq_t[i] = bin_frequencies(h);
    freq_st[i] = joint_frequencies(h, num_classes);
  }
  CorrelationReport rs = similarity_correlation(embeddings, freq_s);
  CorrelationReport rt = similarity_correlation(embeddings, freq_t);
  CorrelationReport rst = similarity_correlation(embeddings, freq_st);
  summary.r_s = rs.r;
  summary.r_t = rt.r;
  summary.r_st = rst.r;
  summary.pair_count = rst.pair_count;

  // Index values, response matrices, embedding statistics.
  std::vector<const UserHistory*> ordered;
  for (const auto& g : graphs) ordered.push_back(history_of.at(g.user_id));
  IndexNormalization norm;
  {
    std::vector<UserHistory> tmp;
    for (const auto* h : ordered) tmp.push_back(*h);
    norm = diversity_normalization(tmp);
  }
  std::vector<double> ist1(n), ist2(n);
  for (std::size_t i = 0; i < n; ++i) {
    ist1[i] = index_st1(*ordered[i], norm);
    ist2[i] = index_st2(*ordered[i], num_classes);
  }

  fs::create_directories(out_dir);
  auto write_metrics = [&](const std::string& name, const MetricsReport& rep) {
    std::ostringstream out;
    out << "user_id,accuracy,precision,recall,f1\n";
    for (const UserMetrics& m : rep.per_user) {
      out << m.user_id << "," << format_real(m.accuracy) << "," << format_real(m.precision) << ","
          << format_real(m.recall) << "," << format_real(m.f1) << "\n";
    }
    write_file((fs::path(out_dir) / ("metrics_" + name + ".csv")).string(), out.str());
  };
  write_metrics("spatial", summary.spatial);
  write_metrics("temporal", summary.temporal);
  write_metrics("joint", summary.joint);

  {
    std::ostringstream out;
    out << "head,accuracy,precision,recall,f1,users,excluded\n";
    auto row = [&](const char* name, const MetricsReport& r) {
      out << name << "," << format_real(r.accuracy) << "," << format_real(r.precision) << ","
          << format_real(r.recall) << "," << format_real(r.f1) << "," << r.per_user.size() << ","
          << r.excluded_empty_target << "\n";
    };
    row("spatial", summary.spatial);
    row("temporal", summary.temporal);
    row("joint", summary.joint);
    write_file((fs::path(out_dir) / "metrics_summary.csv").string(), out.str());
  }
  {
    std::ostringstream out;
    out << "metric,r,pairs\n";
    out << "r_s," << format_real(rs.r) << "," << rs.pair_count << "\n";
    out << "r_t," << format_real(rt.r) << "," << rt.pair_count << "\n";
    out << "r_st," << format_real(rst.r) << "," << rst.pair_count << "\n";
    write_file((fs::path(out_dir) / "correlations.csv").string(), out.str());
  }
  auto write_scatter = [&](const std::string& name, const CorrelationReport& rep) {
    std::ostringstream out;
    out << "d_rep,d_true\n";
    for (const auto& [dr, dt] : rep.pairs) {
      out << format_real(dr) << "," << format_real(dt) << "\n";
    }
    write_file((fs::path(out_dir) / ("scatter_" + name + ".csv")).string(), out.str());
  };
  write_scatter("s", rs);
  write_scatter("t", rt);
  write_scatter("st", rst);

  auto write_response = [&](const std::string& name, const std::vector<double>& idx) {
    auto matrix = response_matrix(embeddings, idx, bins);
    std::ostringstream out;
    out << "bin";
    for (std::size_t j = 0; j < embeddings[0].size(); ++j) out << ",h" << j;
    out << "\n";
    for (std::size_t b = 0; b < matrix.size(); ++b) {
      out << b;
      for (double v : matrix[b]) out << "," << detail::csv_cell(v);
      out << "\n";
    }
    write_file((fs::path(out_dir) / ("response_" + name + ".csv")).string(), out.str());
  };
  write_response("ist1", ist1);
  write_response("ist2", ist2);
  {
    std::ostringstream out;
    out << "user_id,ist1,ist2\n";
    for (std::size_t i = 0; i < n; ++i) {
      out << graphs[i].user_id << "," << format_real(ist1[i]) << "," << format_real(ist2[i])
          << "\n";
    }
    write_file((fs::path(out_dir) / "indexes.csv").string(), out.str());
  }
  {
    auto stats = embedding_stats(embeddings);
    std::ostringstream out;
    out << "dim,min,q1,median,q3,max,mean,outliers\n";
    for (std::size_t j = 0; j < stats.size(); ++j) {
      const DimensionStats& s = stats[j];
      out << j << "," << format_real(s.min) << "," << format_real(s.q1) << ","
          << format_real(s.median) << "," << format_real(s.q3) << "," << format_real(s.max) << ","
          << format_real(s.mean) << "," << s.outliers.size() << "\n";
    }
    write_file((fs::path(out_dir) / "embedding_stats.csv").string(), out.str());
  }
  return summary;
}

inline void run_export_embeddings(const std::string& input, const std::string& out_dir,
                                  const ModelParams& params, std::size_t jobs) {
  auto graphs = load_graphs(input);
  const std::size_t n = graphs.size();
  std::vector<std::vector<double>> embeddings(n);
  parallel_for(n, jobs, [&](std::size_t i) {
    NoGradGuard ng;
    embeddings[i] = forward(graphs[i], params).embedding.values();
  });
  fs::create_directories(out_dir);
  std::ostringstream out;
  out << "user_id";
  for (int j = 0; j < params.dims.embed; ++j) out << ",h" << j;
  out << "\n";
  for (std::size_t i = 0; i < n; ++i) {
    out << graphs[i].user_id;
    for (double v : embeddings[i]) out << "," << format_real(v);
    out << "\n";
  }
  write_file((fs::path(out_dir) / kEmbeddingsFile).string(), out.str());
}

// ----------------------------------------------------------------------------
// Gradient check
// ----------------------------------------------------------------------------

/// The seeded 3-node / 3-edge graph the gradient soundness check runs on.
inline MobilityGraph gradcheck_graph(int num_classes = 10) {
  MobilityGraph g;
  g.user_id = "gradcheck";
  g.num_classes = num_classes;
  g.nodes = {GraphNode{0, "A", 0}, GraphNode{1, "B", 1}, GraphNode{2, "C", 2}};
  GraphEdge e1, e2, e3;
  e1.src = 0; e1.dst = 1; e1.departure_bin = 14; e1.arrival_bin = 16; e1.frequency = 2;
  e1.distance_m = 500; e1.duration_min = 60;
  e2.src = 2; e2.dst = 1; e2.departure_bin = 18; e2.arrival_bin = 19; e2.frequency = 1;
  e2.distance_m = 1500; e2.duration_min = 30;
  e3.src = 1; e3.dst = 2; e3.departure_bin = 20; e3.arrival_bin = 24; e3.frequency = 3;
  e3.distance_m = 800; e3.duration_min = 120;
  g.edges = {e1, e2, e3};
  normalize_weights(g);
  return g;
}

/// Reduced widths keep the full-parameter sweep well under a minute; the
/// full-width sweep is several minutes.
inline ModelDims gradcheck_dims(bool full_width) {
  ModelDims dims;
  if (!full_width) {
    dims.hidden = 16;
    dims.attn_hidden = 8;
    dims.dec_hidden = 32;
  }
  return dims;
}

/// Max relative finite-difference error of the training objective over every
/// parameter tensor on the canonical 3-node graph.
inline double run_gradcheck(std::uint64_t seed, bool full_width, double h = 1e-5) {
  ModelParams params = init_params(seed, gradcheck_dims(full_width));
  MobilityGraph g = gradcheck_graph();
  DistributionTargets targets = build_targets(g);
  ClassPriors priors = compute_priors({targets});
  DBLossConfig cfg;
  auto fn = [&] { return total_loss(forward(g, params), targets, cfg, priors); };
  return grad_check(fn, params.all_tensors(), h);
}

}  // namespace stgraph::pipeline
