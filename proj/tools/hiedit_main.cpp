#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hiedit/error.hpp"
#include "hiedit/pipeline.hpp"

using namespace hiedit;

namespace {

std::string quoted(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

int fail(const std::string& kind, const std::string& extra, const std::string& msg) {
  std::cerr << "error kind=" << kind << extra << " msg=" << quoted(msg) << "\n";
  return 1;
}

RunConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (!path.empty()) {
    cfg = load_config(path);
  } else if (const char* env = std::getenv("HIEDIT_CONFIG"); env && *env) {
    cfg = load_config(env);
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical sequential knowledge editing on a toy language model"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("-c,--config", config_path, "configuration file (default: $HIEDIT_CONFIG, else built-in defaults)");
  app.add_option("-s,--set", overrides, "override one key, e.g. --set train.mu=0.5 (repeatable)");

  auto* pretrain = app.add_subcommand("pretrain", "train the base model on the fact corpus");
  auto* gen = app.add_subcommand("gen-stream", "sample the training and evaluation edit streams");
  std::string train_mode = "hiedit-full", run_mode;
  auto* train = app.add_subcommand("train-editor", "train an editor for one mode");
  train->add_option("--mode", train_mode, "editing mode");
  auto* edit = app.add_subcommand("edit-run", "apply a trained editor along the evaluation stream");
  edit->add_option("--mode", run_mode, "editing mode")->required();
  std::optional<std::size_t> t0;
  auto* eval = app.add_subcommand("eval", "score the base model and every finished edit-run");
  eval->add_option("--t0", t0, "edits counted by edited retention (default: eval.t0)");
  auto* report = app.add_subcommand("report", "write plotting tables under <work_dir>/report");
  auto* show = app.add_subcommand("show-config", "print the resolved configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", "", e.what()) + 1;
  }

  try {
    const RunConfig cfg = resolve_config(config_path, overrides);
    if (*show) {
      std::cout << format_config(cfg);
    } else if (*pretrain) {
      cmd_pretrain(cfg, std::cout);
    } else if (*gen) {
      cmd_gen_stream(cfg, std::cout);
    } else if (*train) {
      cmd_train_editor(cfg, parse_edit_mode(train_mode), std::cout);
    } else if (*edit) {
      cmd_edit_run(cfg, parse_edit_mode(run_mode), std::cout);
    } else if (*eval) {
      cmd_eval(cfg, t0.value_or(cfg.t0), std::cout);
    } else if (*report) {
      cmd_report(cfg, std::cout);
    }
  } catch (const ParseError& e) {
    return fail(e.kind(), " line=" + std::to_string(e.line()), e.what());
  } catch (const ValidationError& e) {
    return fail(e.kind(), " key=" + e.key(), e.what());
  } catch (const DependencyError& e) {
    return fail(e.kind(), " missing=" + quoted(e.missing()), e.what());
  } catch (const TrajectoryAbort& e) {
    return fail(e.kind(), " step=" + std::to_string(e.step()), e.what());
  } catch (const Error& e) {
    return fail(e.kind(), "", e.what());
  } catch (const std::exception& e) {
    return fail("internal", "", e.what());
  }
  return 0;
}
