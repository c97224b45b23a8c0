// Command-line front end for the trajectory-graph representation pipeline.
// Subcommands chain through a workspace directory: synth -> ingest ->
// build-graph -> stats / train -> eval / export-embeddings, plus gradcheck.

#include <cstdlib>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "stgraph/pipeline.hpp"

using namespace stgraph;

namespace {

struct CommonFlags {
  std::string input = ".";
  std::string out = ".";
  std::string config_path;
  std::uint64_t seed = 7;
  bool seed_set = false;
  std::size_t jobs = 1;
};

void add_common(CLI::App* cmd, CommonFlags& flags, bool with_io = true) {
  if (with_io) {
    cmd->add_option("--input", flags.input, "Input file or workspace directory");
    cmd->add_option("--out", flags.out, "Output directory");
  }
  cmd->add_option("--config", flags.config_path, "Config file (key = value lines)");
  cmd->add_option("--seed", flags.seed, "Seed for all stochastic components")
      ->each([&](const std::string&) { flags.seed_set = true; });
  cmd->add_option("--jobs", flags.jobs, "Worker threads for per-user stages");
}

TrainConfig resolve_config(const CommonFlags& flags) {
  TrainConfig cfg;
  std::string path = flags.config_path;
  if (path.empty()) {
    if (const char* env = std::getenv("STGRAPH_CONFIG")) path = env;
  }
  if (!path.empty()) cfg = parse_train_config(read_file(path));
  if (flags.seed_set) cfg.seed = flags.seed;
  return cfg;
}

void print_config(const TrainConfig& cfg) {
  std::cout << "resolved config:\n" << format_train_config(cfg);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatial-temporal trajectory graph representation pipeline"};
  app.require_subcommand(1);

  CommonFlags flags;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic check-in corpus");
  int users_per_profile = 50;
  int days = 10;
  synth->add_option("--users-per-profile", users_per_profile, "Users per planted profile");
  synth->add_option("--days", days, "Days per user");
  add_common(synth, flags);

  auto* ingest = app.add_subcommand("ingest", "Parse and sessionize check-ins");
  FormatConfig fmt;
  std::string category_map_path;
  ingest->add_option("--delimiter", fmt.delimiter, "Column delimiter");
  ingest->add_option("--category-map", category_map_path,
                     "Two-column raw-category to class table");
  ingest->add_option("--timestamp-format", fmt.timestamp_format, "auto | iso | epoch");
  ingest->add_option("--default-offset", fmt.default_offset_minutes,
                     "Timezone offset minutes for offset-free timestamps");
  ingest->add_flag("--strict", fmt.strict, "Fail on the first invalid line");
  add_common(ingest, flags);

  auto* build = app.add_subcommand("build-graph", "Build per-user mobility graphs");
  add_common(build, flags);

  auto* stats = app.add_subcommand("stats", "Corpus statistics and histograms");
  add_common(stats, flags);

  auto* train = app.add_subcommand("train", "Train the encoder/decoder");
  add_common(train, flags);

  auto* eval = app.add_subcommand("eval", "Prediction metrics, correlations, responses");
  double threshold = 0.5;
  std::size_t bins = 10;
  std::string params_path;
  eval->add_option("--threshold", threshold, "Decision threshold for the sigmoid heads");
  eval->add_option("--bins", bins, "Bins of the latent-response matrices");
  eval->add_option("--params", params_path, "Checkpoint path (default: <input>/checkpoint.stp)");
  add_common(eval, flags);

  auto* exp = app.add_subcommand("export-embeddings", "Write per-user embedding vectors");
  exp->add_option("--params", params_path, "Checkpoint path (default: <input>/checkpoint.stp)");
  add_common(exp, flags);

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient soundness");
  double gc_threshold = 1e-4;
  bool gc_full = false;
  gradcheck->add_option("--threshold", gc_threshold, "Max acceptable relative error");
  gradcheck->add_flag("--full", gc_full, "Full-width model (several minutes)");
  add_common(gradcheck, flags, /*with_io=*/false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n" << app.help() << "\n";
    return 1;
  }

  try {
    TrainConfig cfg = resolve_config(flags);
    print_config(cfg);
    std::cout << "seed: " << cfg.seed << "\n";

    if (synth->parsed()) {
      pipeline::run_synth(flags.out, users_per_profile, days, cfg.seed);
      std::cout << "wrote " << flags.out << "/" << pipeline::kCheckinsFile << " and "
                << pipeline::kLabelsFile << "\n";
    } else if (ingest->parsed()) {
      CategoryMap categories;
      if (!category_map_path.empty()) {
        categories = CategoryMap::load(read_file(category_map_path), fmt.delimiter);
      }
      auto summary = pipeline::run_ingest(flags.input, flags.out, fmt, categories);
      std::cout << "records: " << summary.records << "\ninvalid lines: " << summary.invalid
                << "\nkept visits: " << summary.counts.kept
                << "\ncollapsed duplicates: " << summary.counts.collapsed
                << "\ndropped on singleton days: " << summary.counts.dropped_singleton_day
                << "\nusers after filtering: " << summary.users << "\n";
    } else if (build->parsed()) {
      pipeline::run_build_graphs(flags.input, flags.out, flags.jobs);
      std::cout << "graphs written under " << flags.out << "/" << pipeline::kGraphsDir << "\n";
    } else if (stats->parsed()) {
      GraphStats s = pipeline::run_stats(flags.input, flags.out);
      std::cout << "graphs: " << s.graph_count << "\nedges: " << s.edge_count << "\n";
    } else if (train->parsed()) {
      auto summary = pipeline::run_train(flags.input, flags.out, cfg);
      std::cout << "train/val/test users: " << summary.train_users << "/" << summary.val_users
                << "/" << summary.test_users << "\nepochs run: " << summary.epochs
                << "\nbest epoch: " << summary.best_epoch
                << "\nbest validation loss: " << format_real(summary.best_val_loss) << "\n";
    } else if (eval->parsed()) {
      const std::string ckpt = params_path.empty()
                                   ? pipeline::resolve_input(flags.input, pipeline::kCheckpointFile)
                                   : params_path;
      ModelParams params = load_checkpoint(ckpt);
      auto summary =
          pipeline::run_eval(flags.input, flags.out, params, threshold, bins, flags.jobs);
      std::cout << "metric users: " << summary.metric_users << " of " << summary.corpus_users
                << "\njoint head: accuracy " << format_real(summary.joint.accuracy)
                << " precision " << format_real(summary.joint.precision) << " f1 "
                << format_real(summary.joint.f1) << "\ncorrelations: r_s "
                << format_real(summary.r_s) << " r_t " << format_real(summary.r_t) << " r_st "
                << format_real(summary.r_st) << " over " << summary.pair_count << " pairs\n";
    } else if (exp->parsed()) {
      const std::string ckpt = params_path.empty()
                                   ? pipeline::resolve_input(flags.input, pipeline::kCheckpointFile)
                                   : params_path;
      ModelParams params = load_checkpoint(ckpt);
      pipeline::run_export_embeddings(flags.input, flags.out, params, flags.jobs);
      std::cout << "wrote " << flags.out << "/" << pipeline::kEmbeddingsFile << "\n";
    } else if (gradcheck->parsed()) {
      const double err = pipeline::run_gradcheck(cfg.seed, gc_full);
      std::cout << "max relative gradient error: " << format_real(err) << "\n";
      if (!(err < gc_threshold)) {
        std::cerr << "gradient check failed the " << format_real(gc_threshold)
                  << " threshold\n";
        return 3;
      }
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
