// slime: command-line driver for the experiment stages.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "slime/config.hpp"
#include "slime/http_transport.hpp"
#include "slime/pipeline.hpp"

namespace {

using namespace slime;

struct CommonOptions {
  std::string config;
  std::string out;
  std::string mode;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool with_mode) {
  cmd->add_option("-c,--config", o.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("-o,--out", o.out, "output directory (overrides output_dir)");
  if (with_mode) cmd->add_option("--mode", o.mode, "client mode: live, record or replay");
}

ExperimentConfig load(const CommonOptions& o) {
  auto cfg = load_config(o.config);
  if (!o.out.empty()) cfg.output_dir = fs::absolute(o.out);
  if (!o.mode.empty()) {
    cfg.client.mode = parse_client_mode(o.mode);
    validate_paths(cfg);
  }
  return cfg;
}

std::unique_ptr<ChatClient> client_for(const ExperimentConfig& cfg) {
  std::shared_ptr<Transport> transport;
  if (cfg.client.mode != ClientMode::kReplay) transport = std::make_shared<HttpTransport>();
  return make_client(cfg, std::move(transport));
}

void print_files(const StageOutput& out) {
  for (const auto& f : out.files) std::cout << f.string() << '\n';
}

int ingest(const ExperimentConfig& cfg) {
  if (!cfg.data.attack_embeddings.empty()) {
    const auto s = load_spaces(cfg);
    std::cout << "attack: " << s.attack.rows() << " x " << s.attack.dim() << '\n';
    for (const auto& [name, v] : s.victims) std::cout << "victim " << name << ": " << v.rows() << " x " << v.dim() << '\n';
    std::cout << "split: " << s.split.train.size() << " train, " << s.split.test.size() << " test\n";
  }
  if (!cfg.data.tag_embeddings.empty()) std::cout << "tag vocabulary: " << load_vocabulary(cfg).size() << '\n';
  if (!cfg.data.tags.empty()) std::cout << "tag records: " << load_tags(cfg.resolve(cfg.data.tags)).size() << '\n';
  if (!cfg.data.captions.empty()) std::cout << "caption sets: " << load_captions(cfg.resolve(cfg.data.captions)).size() << '\n';
  if (fs::exists(cfg.retrievals_path())) std::cout << "retrieval rows: " << load_retrievals(cfg.retrievals_path()).size() << '\n';
  std::cout << "config hash: " << cfg.hash() << '\n';
  return 0;
}

int cache_seed(const ExperimentConfig& cfg, const std::string& responses) {
  std::ifstream in(responses);
  if (!in) fail(Errc::kConfigError, "cannot open " + responses);
  const auto table = nlohmann::json::parse(in, nullptr, false);
  if (table.is_discarded()) fail(Errc::kConfigError, responses + " is not valid JSON");
  if (cfg.client.cache.empty()) fail(Errc::kConfigError, "client.cache is not configured");
  ReplayCache cache(cfg.resolve(cfg.client.cache));
  std::size_t added = 0, present = 0;
  for (auto& e : response_table_entries(table, fs::path(responses).parent_path(), cfg)) {
    (cache.append(std::move(e)) ? added : present)++;
  }
  std::cout << added << " entries added, " << present << " already present in " << cfg.resolve(cfg.client.cache).string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Embedding-leakage experiments: alignment, tag retrieval and caption reconstruction"};
  app.set_version_flag("--version", std::string(kSlimeVersion));
  app.require_subcommand(1);

  CommonOptions common;
  auto* ingest_cmd = app.add_subcommand("ingest", "validate and summarize the configured inputs");
  auto* align_cmd = app.add_subcommand("align", "alignment sweep over b; saves the maps");
  auto* train_cmd = app.add_subcommand("retriever-train", "train the attack-side tag retriever");
  auto* retrieve_cmd = app.add_subcommand("retrieve", "top-K tags for aligned victim and attack embeddings");
  auto* leak_cmd = app.add_subcommand("eval-neighborhood", "neighborhood recall/precision/F1 over m");
  auto* captions_cmd = app.add_subcommand("attack-captions", "captions from retrieved tags, scored against references");
  auto* adaptive_cmd = app.add_subcommand("attack-adaptive", "structured scenes per conditioning setting, plus ablation");
  auto* domain_cmd = app.add_subcommand("eval-cross-domain", "caption scores partitioned by domain label");
  auto* report_cmd = app.add_subcommand("report", "re-render Markdown/CSV views from report JSON");
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic experiment directory");
  auto* seed_cmd = app.add_subcommand("cache-seed", "add a table of hand-written responses to the replay cache");

  for (auto* cmd : {ingest_cmd, align_cmd, train_cmd, retrieve_cmd, leak_cmd}) add_common(cmd, common, false);
  for (auto* cmd : {captions_cmd, adaptive_cmd, domain_cmd}) add_common(cmd, common, true);
  add_common(seed_cmd, common, false);
  std::string responses;
  seed_cmd->add_option("-r,--responses", responses, "response table (JSON)")->required()->check(CLI::ExistingFile);

  std::string report_dir;
  report_cmd->add_option("dir", report_dir, "directory holding report JSON files")->required()->check(CLI::ExistingDirectory);

  std::string synth_dir;
  synth::DualEncoderOptions synth_opts;
  std::size_t synth_test = 200;
  synth_cmd->add_option("dir", synth_dir, "output directory")->required();
  synth_cmd->add_option("--items", synth_opts.items, "number of images")->capture_default_str();
  synth_cmd->add_option("--tags", synth_opts.tags, "number of tags")->capture_default_str();
  synth_cmd->add_option("--noise", synth_opts.noise, "per-encoder noise")->capture_default_str();
  synth_cmd->add_option("--seed", synth_opts.seed, "generator seed")->capture_default_str();
  synth_cmd->add_option("--test-size", synth_test, "held-out images")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*report_cmd) {
      for (const auto& f : rerender_reports(report_dir)) std::cout << f.string() << '\n';
      return 0;
    }
    if (*synth_cmd) {
      std::cout << write_synthetic_experiment(synth_dir, synth_opts, synth_test).string() << '\n';
      return 0;
    }
    if (*seed_cmd) {
      const auto cfg = read_config(common.config);
      return cache_seed(cfg, responses);
    }
    const auto cfg = load(common);
    if (*ingest_cmd) return ingest(cfg);
    if (*align_cmd) print_files(run_alignment_sweep(cfg));
    if (*train_cmd) print_files(run_retriever_training(cfg));
    if (*retrieve_cmd) print_files(run_retrieve(cfg));
    if (*leak_cmd) print_files(run_leakage_eval(cfg));
    if (*captions_cmd || *adaptive_cmd || *domain_cmd) {
      auto client = client_for(cfg);
      if (*captions_cmd) print_files(run_caption_attack(cfg, *client));
      if (*adaptive_cmd) print_files(run_adaptive_attack(cfg, *client));
      if (*domain_cmd) print_files(run_cross_domain(cfg, *client));
      std::cerr << client->network_calls() << " network call(s), " << client->cache_hits() << " cache hit(s)\n";
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
}
