// Command-line front end: verify | bench | analyze | train-toy, configured by
// a single JSON file. Exit codes: 0 success, 1 check failure, 2 config or
// usage error, 3 I/O error.
#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "vmoba/commands.hpp"
#include "vmoba/config.hpp"
#include "vmoba/parallel.hpp"
#include "vmoba/tensor_io.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  int threads = 0;
  std::string out_dir;
};

void add_common(CLI::App* sub, CommonArgs& args) {
  sub->add_option("--config", args.config_path, "JSON config file")
      ->required();
  sub->add_option("--threads", args.threads,
                  "worker thread cap (1 = bitwise reproducible)")
      ->check(CLI::PositiveNumber);
  sub->add_option("--out", args.out_dir, "output directory override");
}

int dispatch(const std::string& name, const CommonArgs& args) {
  if (args.threads > 0) vmoba::set_max_threads(args.threads);
  vmoba::RunConfig config = vmoba::load_run_config(args.config_path);
  if (!args.out_dir.empty()) config.out_dir = args.out_dir;
  if (name == "verify") return vmoba::cmd_verify(config);
  if (name == "bench") return vmoba::cmd_bench(config);
  if (name == "analyze") return vmoba::cmd_analyze(config);
  return vmoba::cmd_train_toy(config);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Video mixture-of-block-attention reference tool"};
  app.require_subcommand(1);

  CommonArgs args;
  const char* names[4] = {"verify", "bench", "analyze", "train-toy"};
  const char* briefs[4] = {
      "run the oracle, sparsity, gradient, and partition check suites",
      "time dense vs block-sparse attention over a length sweep",
      "emit attention-pattern reports for a stored Q/K pair",
      "train the toy regression stack in each configured attention mode"};
  for (int i = 0; i < 4; ++i) {
    add_common(app.add_subcommand(names[i], briefs[i]), args);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  std::string chosen = app.get_subcommands().front()->get_name();
  try {
    return dispatch(chosen, args);
  } catch (const vmoba::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const vmoba::TensorIoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return 3;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
