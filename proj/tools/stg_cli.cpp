#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "stg/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"spatio-temporal graph forecasting pipeline", "stg"};
  app.require_subcommand(1);
  std::string config;
  std::optional<std::uint64_t> seed;
  const std::pair<const char*, const char*> verbs[] = {
      {"ingest", "read raw series, write the cache and print dataset statistics"},
      {"build-graph", "construct the configured graph from cached data"},
      {"train", "train the configured model and write its checkpoint and run log"},
      {"evaluate", "score a trained checkpoint on the test split"},
      {"benchmark", "train and score every configured model next to the baselines"},
      {"report", "summarize run logs into horizon and cost tables"},
  };
  for (const auto& [name, help] : verbs) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", config, "run configuration (INI)")->required();
    sub->add_option("--seed", seed, "override the graph, model and training seeds");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : stg::cli::kInputError;
  }
  const auto verb = app.get_subcommands().front()->get_name();
  return stg::cli::run(verb, config, seed, std::cout, std::cerr);
}
