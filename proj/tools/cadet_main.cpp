// Command-line front end: dataset generation, training, evaluation, class
// protocol artifacts, downstream probing, and report emission.

#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cadet/coco_io.hpp"
#include "cadet/downstream.hpp"
#include "cadet/errors.hpp"
#include "cadet/experiments.hpp"
#include "cadet/protocol.hpp"
#include "cadet/report_io.hpp"
#include "cadet/shapes.hpp"

namespace {

using namespace cadet;

std::string default_model_name(const DetectorModel& model) {
  std::string prefix =
      model.config().mode == DetectorMode::kOneStage ? "os-" : "ts-";
  return prefix +
         (model.config().head_type == HeadType::kClassAware ? "aw" : "ag");
}

void cmd_gen_shapes(const ShapesConfig& config, const std::string& out_dir) {
  ShapesDataset dataset = generate_shapes(config);
  write_shapes(dataset, out_dir);
  std::cout << "wrote " << dataset.index.images.size() << " images, "
            << dataset.index.annotations.size() << " annotations to " << out_dir
            << "\n";
}

void cmd_train(const std::string& config_path) {
  ExperimentConfig config = load_experiment_config(config_path);
  EvalReport report = config.experiment == "I" ? run_experiment_I(config)
                                               : run_experiment_II(config);
  std::cout << report_table({report}, config.k_grid);
}

void cmd_evaluate_ar(const std::string& checkpoint, const std::string& dataset_dir,
                     const std::string& split_path, std::string name,
                     const std::vector<int>& k_grid, const std::string& out,
                     bool proposals) {
  DetectorModel model = load_checkpoint(checkpoint);
  Dataset dataset = open_dataset(dataset_dir);
  if (name.empty()) name = default_model_name(model);
  if (k_grid.empty()) throw ConfigError("empty k grid");

  auto preds = detect_all(model, dataset, k_grid.back(), proposals);
  EvalReport report;
  report.model = name;

  if (split_path.empty()) {
    report.macro_all = ar_at_k(preds, dataset.index, k_grid);
  } else {
    ClassSplit split = load_class_split(split_path);
    auto curve_of = [&](const std::string& class_name) {
      ARFilter filter;
      filter.class_ids =
          std::set<int>{dataset.index.vocabulary.require(class_name)};
      return ar_at_k(preds, dataset.index, k_grid, 0.5, filter);
    };
    std::vector<ARCurve> seen, unseen;
    for (const auto& class_name : split.seen) seen.push_back(curve_of(class_name));
    for (const auto& class_name : split.unseen()) {
      ARCurve c = curve_of(class_name);
      unseen.push_back(c);
      report.per_class[class_name] = c;
    }
    auto mean = [](std::vector<ARCurve> curves) {
      ARCurve m = curves.front();
      std::fill(m.recalls.begin(), m.recalls.end(), 0.0);
      int live = 0;
      for (const auto& c : curves) {
        if (c.empty_truth_warning) continue;
        for (size_t i = 0; i < c.recalls.size(); ++i) m.recalls[i] += c.recalls[i];
        ++live;
      }
      if (live == 0) {
        m.empty_truth_warning = true;
        return m;
      }
      for (double& r : m.recalls) r /= live;
      return m;
    };
    report.macro_seen = mean(seen);
    report.macro_unseen = mean(unseen);
    report.harmonic = harmonic_mean(*report.macro_seen, *report.macro_unseen);
  }
  for (SizeBucket b : {SizeBucket::kSmall, SizeBucket::kMedium, SizeBucket::kLarge}) {
    ARFilter filter;
    filter.size = b;
    report.per_size[to_string(b)] = ar_at_k(preds, dataset.index, k_grid, 0.5, filter);
  }

  std::cout << report_table({report}, k_grid);
  if (!out.empty()) save_report(report, out);
}

void cmd_split_classes(const std::string& confusion_path, const std::string& out,
                       bool include_background) {
  ConfusionMatrix cm = load_confusion_matrix(confusion_path);
  auto f1 = f1_scores(cm, include_background);
  ClassSplit split = select_unseen(f1);
  save_class_split(split, out);
  std::cout << "unseen: easy=" << split.unseen_easy
            << " medium=" << split.unseen_medium << " hard=" << split.unseen_hard
            << " (" << split.seen.size() << " seen)\n";
}

void cmd_build_exclusion(const std::string& hierarchy_path,
                         const std::vector<std::string>& classes,
                         const std::string& dataset_dir, const std::string& out,
                         const std::vector<std::string>& alias_pairs) {
  std::map<std::string, std::string> aliases;
  for (const auto& pair : alias_pairs) {
    auto eq = pair.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("--alias expects from=to, got '" + pair + "'");
    }
    aliases[pair.substr(0, eq)] = pair.substr(eq + 1);
  }
  SemanticTree tree = load_semantic_tree(hierarchy_path, aliases);

  std::set<std::string> reference(classes.begin(), classes.end());
  if (!dataset_dir.empty()) {
    Dataset dataset = open_dataset(dataset_dir);
    for (const auto& class_name : dataset.index.vocabulary.names()) {
      reference.insert(class_name);
    }
  }
  if (reference.empty()) {
    throw ConfigError("no reference classes (use --classes or --dataset)");
  }

  ExclusionResult result = excluded_classes(tree, reference);
  save_exclusion(result, out);
  std::cout << "excluded " << result.excluded.size() << ", kept "
            << result.kept.size() << " classes\n";
  for (const auto& warning : result.warnings) {
    std::cerr << "warning: " << warning << " not in the hierarchy\n";
  }
}

void cmd_eval_downstream(const std::string& checkpoint,
                         const std::string& dataset_dir,
                         const std::string& classifier_addr, bool oracle,
                         const std::vector<int>& m_grid, double padding,
                         int max_detections, std::string name,
                         const std::string& out) {
  if (oracle == !classifier_addr.empty()) {
    throw ConfigError("pick exactly one of --oracle and --classifier");
  }
  DetectorModel model = load_checkpoint(checkpoint);
  Dataset dataset = open_dataset(dataset_dir);
  if (name.empty()) name = default_model_name(model);

  DownstreamOptions options;
  options.m_grid = m_grid;
  options.padding = padding;

  InferOptions infer_opts;
  infer_opts.max_detections = max_detections;
  auto detect = [&](ImageId id) {
    return infer(model, image_to_tensor(dataset.load_image(id)), id, infer_opts);
  };
  auto load = [&](ImageId id) { return dataset.load_image(id); };

  DownstreamReport downstream;
  if (oracle) {
    OracleClassifier client(dataset.index);
    downstream = evaluate_downstream(dataset.index, load, detect, client, options);
  } else {
    SocketClassifier client(classifier_addr);
    downstream = evaluate_downstream(dataset.index, load, detect, client, options);
  }

  EvalReport report;
  report.model = name;
  report.downstream = downstream;
  for (const auto& [m, acc] : downstream.accuracy_at_m) {
    std::cout << "accuracy@" << m << " " << acc << "\n";
  }
  std::cout << "bo-accuracy " << downstream.bo_accuracy << "\n"
            << "uncropped " << downstream.uncropped_accuracy << "\n"
            << "gt-crop " << downstream.gt_crop_accuracy << "\n"
            << "classifier-failures " << downstream.classifier_failures << "\n";
  if (!out.empty()) save_report(report, out);
}

void cmd_emit_report(const std::vector<std::string>& inputs,
                     const std::string& table_out, const std::string& plot_dir,
                     const std::vector<int>& k_grid) {
  std::vector<EvalReport> reports;
  for (const auto& path : inputs) reports.push_back(load_report(path));
  std::string table = report_table(reports, k_grid);
  std::cout << table;
  if (!table_out.empty()) {
    std::ofstream file(table_out);
    if (!file) throw DataError("cannot write " + table_out);
    file << table;
  }
  if (!plot_dir.empty()) {
    for (const auto& path : write_report_plots(reports, plot_dir)) {
      std::cout << "plot " << path << "\n";
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"class-agnostic detection toolkit"};
  app.require_subcommand(1);

  // gen-shapes
  auto* gen = app.add_subcommand("gen-shapes", "generate a synthetic shapes dataset");
  ShapesConfig shapes_config;
  std::string gen_out;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--count", shapes_config.image_count, "number of images");
  gen->add_option("--size", shapes_config.image_size, "image side in pixels");
  gen->add_option("--seed", shapes_config.seed, "generator seed");
  gen->add_option("--min-shapes", shapes_config.min_shapes, "min shapes per image");
  gen->add_option("--max-shapes", shapes_config.max_shapes, "max shapes per image");
  gen->add_option("--min-side", shapes_config.min_side, "min shape side");
  gen->add_option("--max-side", shapes_config.max_side, "max shape side");
  gen->add_option("--classes", shapes_config.class_count, "shape class count (<=5)");
  gen->add_option("--min-clutter", shapes_config.min_clutter,
                  "min unlabeled clutter splats per image");
  gen->add_option("--max-clutter", shapes_config.max_clutter,
                  "max unlabeled clutter splats per image");

  // train
  auto* train = app.add_subcommand("train", "train a variant from a config file");
  std::string train_config;
  train->add_option("--config", train_config, "experiment config JSON")->required();

  // evaluate-ar
  auto* evaluate = app.add_subcommand("evaluate-ar", "AR curves for a checkpoint");
  std::string eval_checkpoint, eval_dataset, eval_split, eval_name, eval_out;
  std::vector<int> eval_k = kDefaultKGrid;
  bool eval_proposals = false;
  evaluate->add_option("--checkpoint", eval_checkpoint)->required();
  evaluate->add_option("--dataset", eval_dataset)->required();
  evaluate->add_option("--split", eval_split, "class split for seen/unseen curves");
  evaluate->add_option("--name", eval_name, "model name in the report");
  evaluate->add_option("--k", eval_k, "k grid")->delimiter(',');
  evaluate->add_option("--out", eval_out, "report JSON path");
  evaluate->add_flag("--proposals", eval_proposals, "score raw proposals");

  // split-classes
  auto* split = app.add_subcommand("split-classes",
                                   "derive the unseen split from a confusion matrix");
  std::string split_confusion, split_out;
  bool split_no_background = false;
  split->add_option("--confusion", split_confusion)->required();
  split->add_option("--out", split_out)->required();
  split->add_flag("--no-background", split_no_background,
                  "ignore background rows in F1");

  // build-exclusion
  auto* exclusion = app.add_subcommand(
      "build-exclusion", "walk a class hierarchy and exclude related classes");
  std::string excl_hierarchy, excl_dataset, excl_out;
  std::vector<std::string> excl_classes, excl_aliases;
  exclusion->add_option("--hierarchy", excl_hierarchy)->required();
  exclusion->add_option("--classes", excl_classes, "reference class names")
      ->delimiter(',');
  exclusion->add_option("--dataset", excl_dataset,
                        "dataset whose vocabulary is the reference");
  exclusion->add_option("--out", excl_out)->required();
  exclusion->add_option("--alias", excl_aliases, "name alias from=to");

  // eval-downstream
  auto* downstream = app.add_subcommand("eval-downstream",
                                        "crop-classification accuracy");
  std::string ds_checkpoint, ds_dataset, ds_classifier, ds_name, ds_out;
  std::vector<int> ds_m = {1, 5, 10};
  double ds_padding = 0;
  int ds_max_detections = 100;
  bool ds_oracle = false;
  downstream->add_option("--checkpoint", ds_checkpoint)->required();
  downstream->add_option("--dataset", ds_dataset)->required();
  downstream->add_option("--classifier", ds_classifier, "host:port NDJSON service");
  downstream->add_flag("--oracle", ds_oracle, "use the built-in oracle classifier");
  downstream->add_option("--m", ds_m, "accuracy@M grid")->delimiter(',');
  downstream->add_option("--padding", ds_padding, "crop context fraction");
  downstream->add_option("--max-detections", ds_max_detections);
  downstream->add_option("--name", ds_name);
  downstream->add_option("--out", ds_out, "report JSON path");

  // emit-report
  auto* emit = app.add_subcommand("emit-report", "tables and plots from reports");
  std::vector<std::string> emit_inputs;
  std::string emit_table, emit_plots;
  std::vector<int> emit_k = kDefaultKGrid;
  emit->add_option("--in", emit_inputs, "report JSON files")->required();
  emit->add_option("--table", emit_table, "table output path");
  emit->add_option("--plots", emit_plots, "plot output directory");
  emit->add_option("--k", emit_k, "k grid columns")->delimiter(',');

  try {
    app.parse(argc, argv);
    if (*gen) cmd_gen_shapes(shapes_config, gen_out);
    if (*train) cmd_train(train_config);
    if (*evaluate) {
      cmd_evaluate_ar(eval_checkpoint, eval_dataset, eval_split, eval_name,
                      eval_k, eval_out, eval_proposals);
    }
    if (*split) cmd_split_classes(split_confusion, split_out, !split_no_background);
    if (*exclusion) {
      cmd_build_exclusion(excl_hierarchy, excl_classes, excl_dataset, excl_out,
                          excl_aliases);
    }
    if (*downstream) {
      cmd_eval_downstream(ds_checkpoint, ds_dataset, ds_classifier, ds_oracle,
                          ds_m, ds_padding, ds_max_detections, ds_name, ds_out);
    }
    if (*emit) cmd_emit_report(emit_inputs, emit_table, emit_plots, emit_k);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
