#pragma once

#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "stgraph/common.hpp"
#include "stgraph/graph.hpp"
#include "stgraph/loss.hpp"
#include "stgraph/model.hpp"
#include "stgraph/tensor.hpp"

namespace stgraph {

struct TrainConfig {
  std::uint64_t seed = 7;
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 200;
  std::size_t patience = 20;  // epochs without validation improvement
  double split_ratio = 0.8;
  ModelDims dims;
  DBLossConfig loss;
};

/// "key = value" lines; '#' starts a comment. Unknown keys are an error so
/// that typos do not silently fall back to defaults.
inline TrainConfig parse_train_config(const std::string& text, TrainConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view sv = trim(line);
    if (sv.empty() || sv.front() == '#') continue;
    const auto eq = sv.find('=');
    if (eq == std::string_view::npos) {
      throw DataError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = std::string(trim(sv.substr(0, eq)));
    const std::string value = std::string(trim(sv.substr(eq + 1)));
    try {
      if (key == "seed") base.seed = static_cast<std::uint64_t>(parse_int(value));
      else if (key == "learning_rate") base.learning_rate = parse_real(value);
      else if (key == "batch_size") base.batch_size = static_cast<std::size_t>(parse_int(value));
      else if (key == "max_epochs") base.max_epochs = static_cast<std::size_t>(parse_int(value));
      else if (key == "patience") base.patience = static_cast<std::size_t>(parse_int(value));
      else if (key == "split_ratio") base.split_ratio = parse_real(value);
      else if (key == "num_classes") base.dims.num_classes = static_cast<int>(parse_int(value));
      else if (key == "num_bins") base.dims.num_bins = static_cast<int>(parse_int(value));
      else if (key == "hidden") base.dims.hidden = static_cast<int>(parse_int(value));
      else if (key == "embed") base.dims.embed = static_cast<int>(parse_int(value));
      else if (key == "attn_hidden") base.dims.attn_hidden = static_cast<int>(parse_int(value));
      else if (key == "dec_hidden") base.dims.dec_hidden = static_cast<int>(parse_int(value));
      else if (key == "gat_heads") base.dims.gat_heads = static_cast<int>(parse_int(value));
      else if (key == "lambda") base.loss.lambda = parse_real(value);
      else if (key == "kappa") base.loss.kappa = parse_real(value);
      else if (key == "rebalance_alpha") base.loss.rebalance_alpha = parse_real(value);
      else if (key == "rebalance_beta") base.loss.rebalance_beta = parse_real(value);
      else if (key == "rebalance_mu") base.loss.rebalance_mu = parse_real(value);
      else throw DataError("unknown key '" + key + "'");
    } catch (const DataError& e) {
      throw DataError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!(base.split_ratio > 0.0 && base.split_ratio < 1.0)) {
    throw DataError("config: split_ratio must be in (0, 1)");
  }
  return base;
}

inline std::string format_train_config(const TrainConfig& c) {
  std::ostringstream out;
  out << "seed = " << c.seed << "\n"
      << "learning_rate = " << format_real(c.learning_rate) << "\n"
      << "batch_size = " << c.batch_size << "\n"
      << "max_epochs = " << c.max_epochs << "\n"
      << "patience = " << c.patience << "\n"
      << "split_ratio = " << format_real(c.split_ratio) << "\n"
      << "num_classes = " << c.dims.num_classes << "\n"
      << "num_bins = " << c.dims.num_bins << "\n"
      << "hidden = " << c.dims.hidden << "\n"
      << "embed = " << c.dims.embed << "\n"
      << "attn_hidden = " << c.dims.attn_hidden << "\n"
      << "dec_hidden = " << c.dims.dec_hidden << "\n"
      << "gat_heads = " << c.dims.gat_heads << "\n"
      << "lambda = " << format_real(c.loss.lambda) << "\n"
      << "kappa = " << format_real(c.loss.kappa) << "\n"
      << "rebalance_alpha = " << format_real(c.loss.rebalance_alpha) << "\n"
      << "rebalance_beta = " << format_real(c.loss.rebalance_beta) << "\n"
      << "rebalance_mu = " << format_real(c.loss.rebalance_mu) << "\n";
  return out.str();
}

/// Seeded shuffle, then a prefix split of size round(ratio * n).
inline std::pair<std::vector<MobilityGraph>, std::vector<MobilityGraph>> split_dataset(
    const std::vector<MobilityGraph>& graphs, double ratio, std::uint64_t seed) {
  if (graphs.size() < 2) throw DataError("split_dataset: need at least 2 graphs");
  std::vector<std::size_t> order(graphs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, 0x59117));
  rng.shuffle(order);
  const auto cut = static_cast<std::size_t>(
      std::lround(ratio * static_cast<double>(graphs.size())));
  std::pair<std::vector<MobilityGraph>, std::vector<MobilityGraph>> out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < cut ? out.first : out.second).push_back(graphs[order[i]]);
  }
  return out;
}

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;  // mean per graph
  double val_loss = 0.0;
  double seconds = 0.0;  // wall clock; excluded from persisted logs
  double grad_norm = 0.0;  // mean global gradient norm across batches
};

struct TrainLog {
  std::vector<EpochLog> epochs;

  /// Deterministic columns only (timing left out so reruns byte-match).
  std::string to_table() const {
    std::ostringstream out;
    out << "epoch,train_loss,val_loss,grad_norm\n";
    for (const EpochLog& e : epochs) {
      out << e.epoch << "," << format_real(e.train_loss) << "," << format_real(e.val_loss) << ","
          << format_real(e.grad_norm) << "\n";
    }
    return out.str();
  }
};

struct TrainResult {
  ModelParams params;  // best-validation parameters
  TrainLog log;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  std::map<std::string, std::size_t> backward_counts;  // per graph id
};

/// Running state of an interrupted/resumable optimization.
struct TrainState {
  ModelParams params;
  ModelParams best_params;
  OptimState optim;
  std::size_t completed_epochs = 0;
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  TrainLog log;
  std::map<std::string, std::size_t> backward_counts;
};

namespace detail {

inline double eval_mean_loss(const std::vector<MobilityGraph>& graphs,
                             const std::vector<DistributionTargets>& targets,
                             const ModelParams& params, const DBLossConfig& cfg,
                             const ClassPriors& priors) {
  NoGradGuard ng;
  double acc = 0.0;
  for (std::size_t i = 0; i < graphs.size(); ++i) {
    acc += total_loss(forward(graphs[i], params), targets[i], cfg, priors).value();
  }
  return graphs.empty() ? 0.0 : acc / static_cast<double>(graphs.size());
}

}  // namespace detail

/// Runs epochs completed_epochs+1 .. max_epochs (or until patience runs out).
/// Per epoch: seeded shuffle into batches, loss summed over each batch's
/// graphs, one optimizer step per batch. Class priors come from the training
/// set only; the best-validation parameters are returned.
inline TrainResult train_epochs(TrainState& state, const std::vector<MobilityGraph>& train_set,
                                const std::vector<MobilityGraph>& val_set,
                                const TrainConfig& config) {
  if (train_set.empty()) throw DataError("train: empty training set");

  std::vector<DistributionTargets> train_targets, val_targets;
  for (const MobilityGraph& g : train_set) train_targets.push_back(build_targets(g));
  for (const MobilityGraph& g : val_set) val_targets.push_back(build_targets(g));
  const ClassPriors priors = compute_priors(train_targets);

  std::vector<Tensor> tensors = state.params.all_tensors();
  AdamConfig adam;
  adam.lr = config.learning_rate;

  for (std::size_t epoch = state.completed_epochs + 1; epoch <= config.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(config.seed, 0xE90C4 + epoch));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    double grad_norm_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      state.params.zero_grad();
      for (std::size_t k = start; k < end; ++k) {
        const MobilityGraph& g = train_set[order[k]];
        Tensor loss = total_loss(forward(g, state.params), train_targets[order[k]], config.loss,
                                 priors);
        if (!std::isfinite(loss.value())) {
          throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                             " on graph " + g.user_id);
        }
        backward(loss);
        state.backward_counts[g.user_id] += 1;
        epoch_loss += loss.value();
      }
      double gsq = 0.0;
      for (const Tensor& t : tensors) {
        if (!t.has_grad()) continue;
        for (double gv : t.grad()) gsq += gv * gv;
      }
      grad_norm_sum += std::sqrt(gsq);
      ++batches;
      optimizer_step(tensors, state.optim, adam);
    }
    state.params.zero_grad();

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = epoch_loss / static_cast<double>(train_set.size());
    log.val_loss = val_set.empty()
                       ? log.train_loss
                       : detail::eval_mean_loss(val_set, val_targets, state.params, config.loss,
                                                priors);
    log.grad_norm = batches == 0 ? 0.0 : grad_norm_sum / static_cast<double>(batches);
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    state.log.epochs.push_back(log);
    state.completed_epochs = epoch;

    if (log.val_loss < state.best_val_loss) {
      state.best_val_loss = log.val_loss;
      state.best_epoch = epoch;
      state.best_params = state.params.clone();
    } else if (epoch - state.best_epoch >= config.patience) {
      break;
    }
  }

  TrainResult result;
  result.params = state.best_params.clone();
  result.log = state.log;
  result.best_epoch = state.best_epoch;
  result.best_val_loss = state.best_val_loss;
  result.backward_counts = state.backward_counts;
  return result;
}

inline TrainState make_train_state(const TrainConfig& config) {
  TrainState state;
  state.params = init_params(config.seed, config.dims);
  state.best_params = state.params.clone();
  state.optim.init(state.params.all_tensors());
  return state;
}

inline TrainResult train(const std::vector<MobilityGraph>& train_set,
                         const std::vector<MobilityGraph>& val_set, const TrainConfig& config) {
  TrainState state = make_train_state(config);
  return train_epochs(state, train_set, val_set, config);
}

// ----------------------------------------------------------------------------
// Resumable training state (text, bit-exact)
// ----------------------------------------------------------------------------

namespace detail {

inline void write_tensor_line(std::ostringstream& out, const std::string& name, const Tensor& t) {
  out << name << " " << t.ndim();
  for (std::size_t e : t.shape()) out << " " << e;
  for (double v : t.values()) out << " " << format_real(v);
  out << "\n";
}

inline void write_array_line(std::ostringstream& out, const std::string& name,
                             const std::vector<double>& v) {
  out << name << " 1 " << v.size();
  for (double x : v) out << " " << format_real(x);
  out << "\n";
}

}  // namespace detail

inline std::string serialize_train_state(const TrainState& state) {
  std::ostringstream out;
  out << "STTRAIN 1\n";
  out << "completed_epochs " << state.completed_epochs << "\n";
  out << "best_epoch " << state.best_epoch << "\n";
  out << "best_val_loss " << format_real(state.best_val_loss) << "\n";
  out << "optim_step " << state.optim.step << "\n";
  out << "PARAMS\n" << serialize_params(state.params);
  out << "BEST\n" << serialize_params(state.best_params);
  out << "MOMENTS\n";
  auto named = state.params.named_tensors();
  for (std::size_t i = 0; i < named.size(); ++i) {
    detail::write_array_line(out, "m." + named[i].first, state.optim.m[i]);
    detail::write_array_line(out, "v." + named[i].first, state.optim.v[i]);
  }
  return out.str();
}

inline TrainState deserialize_train_state(const std::string& text) {
  const auto params_pos = text.find("PARAMS\n");
  const auto best_pos = text.find("BEST\n");
  const auto moments_pos = text.find("MOMENTS\n");
  if (text.rfind("STTRAIN 1\n", 0) != 0 || params_pos == std::string::npos ||
      best_pos == std::string::npos || moments_pos == std::string::npos) {
    throw DataError("train state: bad layout");
  }
  TrainState state;
  {
    std::istringstream head(text.substr(0, params_pos));
    std::string line;
    std::getline(head, line);  // header
    while (std::getline(head, line)) {
      auto tok = split_ws(line);
      if (tok.size() != 2) throw DataError("train state: bad scalar line");
      if (tok[0] == "completed_epochs") state.completed_epochs = parse_int(tok[1]);
      else if (tok[0] == "best_epoch") state.best_epoch = parse_int(tok[1]);
      else if (tok[0] == "best_val_loss") state.best_val_loss = parse_real(tok[1]);
      else if (tok[0] == "optim_step") state.optim.step = parse_int(tok[1]);
      else throw DataError("train state: unknown field " + tok[0]);
    }
  }
  state.params = deserialize_params(
      text.substr(params_pos + 7, best_pos - (params_pos + 7)));
  state.best_params =
      deserialize_params(text.substr(best_pos + 5, moments_pos - (best_pos + 5)));

  auto named = state.params.named_tensors();
  state.optim.m.assign(named.size(), {});
  state.optim.v.assign(named.size(), {});
  std::istringstream mom(text.substr(moments_pos + 8));
  std::string line;
  std::map<std::string, std::vector<double>> arrays;
  while (std::getline(mom, line)) {
    auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok.size() < 3) throw DataError("train state: bad moment line");
    const std::size_t n = static_cast<std::size_t>(parse_int(tok[2]));
    if (tok.size() != 3 + n) throw DataError("train state: moment length mismatch");
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = parse_real(tok[3 + i]);
    arrays[tok[0]] = std::move(v);
  }
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto mi = arrays.find("m." + named[i].first);
    auto vi = arrays.find("v." + named[i].first);
    if (mi == arrays.end() || vi == arrays.end()) {
      throw DataError("train state: missing moments for " + named[i].first);
    }
    if (mi->second.size() != named[i].second.numel()) {
      throw DataError("train state: moment size mismatch for " + named[i].first);
    }
    state.optim.m[i] = mi->second;
    state.optim.v[i] = vi->second;
  }
  return state;
}

inline void save_train_state(const TrainState& state, const std::string& path) {
  write_file(path, serialize_train_state(state));
}

inline TrainState load_train_state(const std::string& path) {
  return deserialize_train_state(read_file(path));
}

}  // namespace stgraph
