// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0

#include "kgpl/cli.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "kgpl/config.hpp"
#include "kgpl/metrics.hpp"

namespace kgpl {

namespace fs = std::filesystem;
using nlohmann::json;

// ------------------------------------------------------------------ names

std::vector<std::string> tissue_class_names(const PhantomSpec& spec) {
  std::vector<std::string> names{"background"};
  for (int t = 1; t <= spec.num_tissues; ++t)
    names.push_back(spec.num_tissues == 3 ? std::vector<std::string>{"CSF", "GM", "WM"}[t - 1] : "tissue_" + std::to_string(t));
  return names;
}

std::vector<std::string> structure_class_names(const PhantomSpec& spec) {
  const auto tissues = tissue_class_names(spec);
  const int per = spec.num_structures / spec.num_tissues;
  std::vector<std::string> names{"background"};
  for (int s = 1; s <= spec.num_structures; ++s)
    names.push_back(tissues[(s - 1) / per + 1] + "_" + std::to_string((s - 1) % per + 1));
  return names;
}

// ------------------------------------------------------------------ reports

namespace {

json number_or_null(std::optional<double> v) { return v ? json(*v) : json(nullptr); }

std::optional<double> mean_of(const std::vector<std::optional<double>>& values) {
  double sum = 0;
  int n = 0;
  for (const auto& v : values)
    if (v) sum += *v, ++n;
  if (n == 0) return std::nullopt;
  return sum / n;
}

std::optional<double> opt_number(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

struct TaskAccumulator {
  std::vector<std::string> names;
  std::map<int, std::vector<std::optional<double>>> dsc, asd;

  void add(std::size_t subject, std::size_t subjects, const MetricTable& table) {
    for (const auto& row : table.rows) {
      auto& d = dsc[row.class_id];
      auto& a = asd[row.class_id];
      d.resize(subjects);
      a.resize(subjects);
      d[subject] = row.dsc;
      a[subject] = row.asd;
    }
  }

  json finish(std::size_t subjects) {
    json classes = json::array();
    std::vector<std::optional<double>> class_dsc, class_asd;
    for (auto& [id, d] : dsc) {
      auto& a = asd[id];
      d.resize(subjects);
      a.resize(subjects);
      const auto md = mean_of(d), ma = mean_of(a);
      class_dsc.push_back(md);
      class_asd.push_back(ma);
      json per_dsc = json::array(), per_asd = json::array();
      for (std::size_t s = 0; s < subjects; ++s) {
        per_dsc.push_back(number_or_null(d[s]));
        per_asd.push_back(number_or_null(a[s]));
      }
      classes.push_back({{"id", id},
                         {"name", names.at(static_cast<std::size_t>(id))},
                         {"dsc", number_or_null(md)},
                         {"asd", number_or_null(ma)},
                         {"per_subject_dsc", per_dsc},
                         {"per_subject_asd", per_asd}});
    }
    return {{"classes", classes},
            {"average", {{"dsc", number_or_null(mean_of(class_dsc))}, {"asd", number_or_null(mean_of(class_asd))}}}};
  }
};

}  // namespace

json evaluate_report(const LoadedCheckpoint& tissue, const LoadedCheckpoint& structure, const Dataset& data) {
  const auto test = data.indices("test");
  if (test.empty()) throw Error(ErrorCode::BadConfig, "the test split is empty");
  const auto table = structure_to_tissue_table(data.spec);
  if (tissue.info.backbone.num_classes != data.spec.tissue_classes() ||
      structure.info.backbone.num_classes != data.spec.structure_classes())
    throw Error(ErrorCode::ShapeMismatch, "checkpoint class counts do not match the dataset");

  TaskAccumulator t_acc{tissue_class_names(data.spec), {}, {}};
  TaskAccumulator s_acc{structure_class_names(data.spec), {}, {}};
  json subjects = json::array();
  double agreement = 0;
  const bool with_image = structure.info.train.structure_with_image;
  for (std::size_t n = 0; n < test.size(); ++n) {
    const auto& sample = data.samples[test[n]];
    const auto result = cascade_predict(*tissue.model, *structure.model, sample.volume, with_image);
    const auto gt_tissue = crop(sample.tissue, result.box);
    const auto gt_structure = crop(sample.structure, result.box);
    t_acc.add(n, test.size(), report(result.tissue, gt_tissue, t_acc.names));
    s_acc.add(n, test.size(), report(result.structure, gt_structure, s_acc.names));
    agreement += refinement_agreement(result.tissue, result.structure, table);
    subjects.push_back(sample.id);
  }
  return {{"format", "kgpl-report-1"},
          {"tissue_mode", std::string(to_string(tissue.info.train.mode))},
          {"structure_mode", std::string(to_string(structure.info.train.mode))},
          {"subjects", subjects},
          {"refinement_agreement", agreement / static_cast<double>(test.size())},
          {"tasks", {{"tissue", t_acc.finish(test.size())}, {"structure", s_acc.finish(test.size())}}}};
}

std::string report_csv(const json& report) {
  std::ostringstream out;
  auto fmt = [](const json& v) -> std::string {
    if (v.is_null()) return "";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v.get<double>());
    return buf;
  };
  out << "task,class_id,class,dsc,asd\n";
  for (const auto& [task, body] : report.at("tasks").items()) {
    for (const auto& c : body.at("classes"))
      out << task << ',' << c.at("id").get<int>() << ',' << c.at("name").get<std::string>() << ',' << fmt(c.at("dsc"))
          << ',' << fmt(c.at("asd")) << '\n';
    out << task << ",,Average," << fmt(body.at("average").at("dsc")) << ',' << fmt(body.at("average").at("asd")) << '\n';
  }
  return out.str();
}

namespace {

json t_test_json(const std::vector<std::optional<double>>& a, const std::vector<std::optional<double>>& b) {
  std::vector<double> xa, xb;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] && b[i]) xa.push_back(*a[i]), xb.push_back(*b[i]);
  if (xa.size() < 2) return {{"pairs", xa.size()}, {"t_statistic", nullptr}, {"p_value", nullptr}};
  const auto t = paired_t_test(xa, xb);
  json tj = std::isfinite(t.t_statistic) ? json(t.t_statistic) : json(t.t_statistic > 0 ? "inf" : "-inf");
  return {{"pairs", t.pairs}, {"mean_difference", t.mean_difference}, {"t_statistic", tj}, {"p_value", t.p_value}};
}

std::vector<std::optional<double>> optional_list(const json& j) {
  std::vector<std::optional<double>> out;
  for (const auto& v : j) out.push_back(opt_number(v));
  return out;
}

std::optional<double> difference(const json& a, const json& b) {
  const auto x = opt_number(a), y = opt_number(b);
  if (!x || !y) return std::nullopt;
  return *y - *x;
}

}  // namespace

json compare_reports(const json& a, const json& b) {
  try {
    if (a.at("subjects") != b.at("subjects"))
      throw Error(ErrorCode::MismatchedClasses, "reports cover different subjects");
    const auto& ta = a.at("tasks");
    const auto& tb = b.at("tasks");
    for (const auto& [task, body] : ta.items())
      if (!tb.contains(task)) throw Error(ErrorCode::MismatchedClasses, "task '" + task + "' missing from second report");
    for (const auto& [task, body] : tb.items())
      if (!ta.contains(task)) throw Error(ErrorCode::MismatchedClasses, "task '" + task + "' missing from first report");

    json tasks = json::object();
    for (const auto& [task, body_a] : ta.items()) {
      const auto& body_b = tb.at(task);
      const auto& ca = body_a.at("classes");
      const auto& cb = body_b.at("classes");
      std::vector<int> ids_a, ids_b;
      for (const auto& c : ca) ids_a.push_back(c.at("id").get<int>());
      for (const auto& c : cb) ids_b.push_back(c.at("id").get<int>());
      if (ids_a != ids_b) throw Error(ErrorCode::MismatchedClasses, "class sets differ for task '" + task + "'");

      const auto subjects = a.at("subjects").size();
      std::vector<std::optional<double>> avg_a(subjects), avg_b(subjects);
      std::vector<std::vector<std::optional<double>>> cols_a, cols_b;
      json classes = json::array();
      for (std::size_t i = 0; i < ca.size(); ++i) {
        const auto pa = optional_list(ca[i].at("per_subject_dsc"));
        const auto pb = optional_list(cb[i].at("per_subject_dsc"));
        cols_a.push_back(pa);
        cols_b.push_back(pb);
        json row{{"id", ids_a[i]},
                 {"name", ca[i].at("name")},
                 {"delta_dsc", number_or_null(difference(ca[i].at("dsc"), cb[i].at("dsc")))},
                 {"delta_asd", number_or_null(difference(ca[i].at("asd"), cb[i].at("asd")))}};
        row["dsc_t_test"] = t_test_json(pa, pb);
        classes.push_back(row);
      }
      for (std::size_t s = 0; s < subjects; ++s) {
        std::vector<std::optional<double>> ra, rb;
        for (std::size_t i = 0; i < cols_a.size(); ++i) {
          if (s < cols_a[i].size()) ra.push_back(cols_a[i][s]);
          if (s < cols_b[i].size()) rb.push_back(cols_b[i][s]);
        }
        avg_a[s] = mean_of(ra);
        avg_b[s] = mean_of(rb);
      }
      json average{{"delta_dsc", number_or_null(difference(body_a.at("average").at("dsc"), body_b.at("average").at("dsc")))},
                   {"delta_asd", number_or_null(difference(body_a.at("average").at("asd"), body_b.at("average").at("asd")))}};
      average["dsc_t_test"] = t_test_json(avg_a, avg_b);
      tasks[task] = {{"classes", classes}, {"average", average}};
    }
    return {{"format", "kgpl-compare-1"},
            {"a_mode", a.value("tissue_mode", "")},
            {"b_mode", b.value("tissue_mode", "")},
            {"subjects", a.at("subjects").size()},
            {"tasks", tasks}};
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorCode::BadConfig, std::string("malformed report: ") + e.what());
  }
}

// ------------------------------------------------------------------ commands

namespace cli {

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IOFailure, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::IOFailure, "write failed for " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IOFailure, "cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const std::exception& e) {
    throw Error(ErrorCode::IOFailure, path.string() + ": " + e.what());
  }
}

fs::path cache_dir_from_env() {
  const char* v = std::getenv("KGPL_CACHE_DIR");
  return v ? fs::path(v) : fs::path();
}

struct Options {
  int threads = 1;
  std::optional<std::uint64_t> seed;

  // phantoms
  std::string spec;
  std::size_t count = 0;
  std::string out;

  // pretrain / finetune
  std::string backbone;
  std::string stage;
  std::string config;
  std::string data;
  std::string init;
  std::string ckpt;

  // evaluate / compare
  std::string tissue_ckpt;
  std::string structure_ckpt;
  std::vector<std::string> reports;
};

int cmd_phantoms(const Options& o, std::ostream& out) {
  auto file = load_phantom_file(o.spec);
  if (o.seed) file.spec.seed = *o.seed;
  const auto m = write_phantom_dataset(o.out, file.spec, o.count, file.ratios);
  out << "wrote " << m.entries.size() << " phantoms to " << o.out << "\n";
  return 0;
}

fs::path pick_out(const Options& o, const RunConfig& rc) {
  fs::path out = o.out.empty() ? rc.out_dir : fs::path(o.out);
  if (out.empty()) throw Error(ErrorCode::BadConfig, "no output directory: pass --out or set [output] dir");
  return out;
}

fs::path pick_data(const Options& o, const RunConfig& rc) {
  fs::path d = o.data.empty() ? rc.data_dir : fs::path(o.data);
  if (d.empty()) throw Error(ErrorCode::BadConfig, "no dataset: pass --data or set [data] dir");
  return d;
}

void print_summary(std::ostream& out, const RunResult& r, const fs::path& dir) {
  out << "best epoch " << r.fit.best_epoch << " val_dsc " << r.fit.best_val_dsc << " trainable_params "
      << r.info.trainable_params << " encoder_frozen " << (r.info.encoder_frozen ? "true" : "false") << "\n"
      << "checkpoint " << dir.string() << "\n";
}

int cmd_pretrain(const Options& o, std::ostream& out) {
  const auto rc = RunConfig::load(o.config);
  const auto stage = stage_from_string(o.stage);
  auto cfg = rc.train_config(TrainMode::pretrain_full, stage);
  auto bb = rc.backbone_config(backbone_kind_from_string(o.backbone));
  if (o.seed) cfg.seed = bb.seed = *o.seed;
  const auto data = load_dataset(pick_data(o, rc));
  bb.in_channels = stage == Stage::tissue ? 1 : data.spec.tissue_classes() + (cfg.structure_with_image ? 1 : 0);
  bb.num_classes = stage == Stage::tissue ? data.spec.tissue_classes() : data.spec.structure_classes();
  const auto dir = pick_out(o, rc);
  RunOptions ro;
  ro.out_dir = dir;
  ro.log_path = dir / "train_log.jsonl";
  const auto r = pretrain(bb, data, cfg, ro);
  print_summary(out, r, dir);
  return 0;
}

int cmd_finetune(const Options& o, std::ostream& out) {
  const auto rc = RunConfig::load(o.config);
  const auto pre = load_checkpoint(o.ckpt);
  const auto mode = o.init == "knowledge" ? TrainMode::finetune_kgpl
                    : o.init == "random"  ? TrainMode::finetune_random_prompts
                                          : TrainMode::finetune_full;
  auto cfg = rc.train_config(mode, pre.info.train.stage);
  cfg.structure_with_image = pre.info.train.structure_with_image;
  if (o.seed) cfg.seed = *o.seed;
  const auto data = load_dataset(pick_data(o, rc));
  const auto encoder = rc.knowledge.make_encoder();
  const auto dir = pick_out(o, rc);
  RunOptions ro;
  ro.out_dir = dir;
  ro.log_path = dir / "train_log.jsonl";
  ro.cache_dir = cache_dir_from_env();
  ro.encoder = encoder.get();
  const auto r = finetune(pre, data, cfg, ro);
  print_summary(out, r, dir);
  return 0;
}

int cmd_evaluate(const Options& o, std::ostream& out) {
  const auto tissue = load_checkpoint(o.tissue_ckpt);
  const auto structure = load_checkpoint(o.structure_ckpt);
  const auto data = load_dataset(o.data);
  const auto report = evaluate_report(tissue, structure, data);
  fs::path base = o.out;
  if (base.extension() == ".json" || base.extension() == ".csv") base.replace_extension();
  write_text(fs::path(base.string() + ".json"), report.dump(2) + "\n");
  write_text(fs::path(base.string() + ".csv"), report_csv(report));
  out << "tissue average DSC " << report["tasks"]["tissue"]["average"]["dsc"] << ", structure average DSC "
      << report["tasks"]["structure"]["average"]["dsc"] << ", refinement agreement "
      << report["refinement_agreement"] << "\n";
  return 0;
}

int cmd_compare(const Options& o, std::ostream& out) {
  const auto delta = compare_reports(read_json(o.reports.at(0)), read_json(o.reports.at(1)));
  write_text(o.out, delta.dump(2) + "\n");
  for (const auto& [task, body] : delta["tasks"].items())
    out << task << " average delta DSC " << body["average"]["delta_dsc"] << " p "
        << body["average"]["dsc_t_test"]["p_value"] << "\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Knowledge-guided prompt learning for 3D brain segmentation", "kgpl"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--threads", o.threads, "Intra-op threads (1 keeps runs bit-reproducible)")->check(CLI::PositiveNumber);
  auto seed_opt = [&](CLI::App* sub) {
    sub->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& s) { o.seed = s; }, "Override seeds");
  };

  const std::vector<std::string> backbones{"unet", "unetr", "swin", "conv_unet", "patch_attention", "windowed_attention"};

  auto* phantoms = app.add_subcommand("phantoms", "Generate a synthetic phantom dataset");
  phantoms->add_option("--spec", o.spec, "Phantom spec (TOML)")->required()->check(CLI::ExistingFile);
  phantoms->add_option("--count", o.count, "Number of phantoms")->required()->check(CLI::PositiveNumber);
  phantoms->add_option("--out", o.out, "Output directory")->required();
  seed_opt(phantoms);

  auto* pre = app.add_subcommand("pretrain", "Stage-1 training of every partition on noisy labels");
  pre->add_option("--backbone", o.backbone)->required()->check(CLI::IsMember(backbones));
  pre->add_option("--stage", o.stage)->required()->check(CLI::IsMember({"tissue", "structure"}));
  pre->add_option("--config", o.config, "Run configuration (TOML)")->required()->check(CLI::ExistingFile);
  pre->add_option("--data", o.data, "Dataset directory (overrides [data] dir)");
  pre->add_option("--out", o.out, "Checkpoint directory (overrides [output] dir)");
  seed_opt(pre);

  auto* fine = app.add_subcommand("finetune", "Stage-2 fine-tuning from a pretrained checkpoint");
  fine->add_option("--init", o.init)->required()->check(CLI::IsMember({"knowledge", "random", "full"}));
  fine->add_option("--ckpt", o.ckpt, "Pretrained checkpoint directory")->required();
  fine->add_option("--config", o.config, "Run configuration (TOML)")->required()->check(CLI::ExistingFile);
  fine->add_option("--data", o.data, "Dataset directory (overrides [data] dir)");
  fine->add_option("--out", o.out, "Checkpoint directory (overrides [output] dir)");
  seed_opt(fine);

  auto* eval = app.add_subcommand("evaluate", "Cascade evaluation on the test split");
  eval->add_option("--tissue-ckpt", o.tissue_ckpt)->required();
  eval->add_option("--structure-ckpt", o.structure_ckpt)->required();
  eval->add_option("--data", o.data)->required();
  eval->add_option("--out", o.out, "Report path; both .json and .csv are written")->required();

  auto* cmp = app.add_subcommand("compare", "Paired comparison of two evaluation reports");
  cmp->add_option("--reports", o.reports)->required()->expected(2);
  cmp->add_option("--out", o.out)->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  }

  torch::set_num_threads(o.threads);
  try {
    if (phantoms->parsed()) return cmd_phantoms(o, out);
    if (pre->parsed()) return cmd_pretrain(o, out);
    if (fine->parsed()) return cmd_finetune(o, out);
    if (eval->parsed()) return cmd_evaluate(o, out);
    if (cmp->parsed()) return cmd_compare(o, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace cli

}  // namespace kgpl
