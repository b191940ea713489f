#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "htr/htr.hpp"

namespace {

htr::GrayImage tensor_to_image(const htr::Tensor& t) {
  htr::GrayImage img(t.dim(0), t.dim(1));
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double v = std::clamp(t.at(y, x, static_cast<std::size_t>(0)), 0.0, 1.0);
      img.at(y, x) = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  return img;
}

struct DecoderBundle {
  htr::CharSet charset;
  htr::PrefixTree tree;
  htr::WordLM lm;
  htr::DecoderConfig cfg;
};

// Lexicon and language model come from the training transcripts, matching
// the documented prediction setup.
DecoderBundle build_decoder(const htr::Partition& part, std::size_t bw,
                            const std::string& mode, double smooth) {
  DecoderBundle d;
  d.charset = part.charset;
  std::string corpus;
  for (const htr::Sample& s : part.train) {
    corpus += s.transcript;
    corpus += '\n';
  }
  d.tree = htr::lexicon_from_corpus(corpus, d.charset);
  d.lm = htr::WordLM::train(corpus, d.charset, smooth);
  d.cfg.beam_width = bw;
  d.cfg.mode = htr::parse_wbs_mode(mode);
  d.cfg.smooth = smooth;
  return d;
}

std::string strip_pgm_suffix(const std::string& path) {
  if (path.size() > 4 && path.substr(path.size() - 4) == ".pgm")
    return path.substr(0, path.size() - 4);
  return path;
}

void print_cost_table(const htr::CostReport& report) {
  std::cout << std::left << std::setw(22) << "layer" << std::setw(12) << "kind"
            << std::right << std::setw(12) << "params" << std::setw(16) << "mults"
            << "\n";
  for (const htr::LayerCost& row : report.rows) {
    std::cout << std::left << std::setw(22) << row.name << std::setw(12) << row.kind
              << std::right << std::setw(12) << row.params << std::setw(16);
    if (row.mults > 0)
      std::cout << row.mults;
    else
      std::cout << "-";
    std::cout << "\n";
  }
  std::cout << std::left << std::setw(34) << "total" << std::right << std::setw(12)
            << report.total_params << std::setw(16) << report.total_mults << "\n";
}

// Six layout variants of the full architecture: computed parameter totals
// next to the reference totals this implementation is compared against.
// The GRU bias convention differs between the two columns (the reference
// counts one extra bias set per gate and direction), so per-row residuals
// are expected and reported rather than hidden.
void print_variant_report(std::size_t charset_size) {
  const htr::ModelConfig base = htr::ModelConfig::reference(charset_size);
  std::cout << std::left << std::setw(20) << "layout" << std::right << std::setw(12)
            << "params" << std::setw(12) << "reference" << std::setw(12) << "residual"
            << "\n";
  for (const htr::LayoutVariant& v : htr::layout_variants()) {
    htr::ModelConfig cfg = base;
    cfg.apply_layout(v.layout);
    const std::uint64_t total = htr::model_cost(cfg).total_params;
    const std::int64_t residual =
        static_cast<std::int64_t>(total) - static_cast<std::int64_t>(v.reference_total);
    std::cout << std::left << std::setw(20) << v.layout << std::right << std::setw(12)
              << total << std::setw(12) << v.reference_total << std::setw(12)
              << residual << "\n";
  }
  htr::ModelConfig all_c = base;
  all_c.apply_layout("C--C--C--C--C--C");
  const std::uint64_t base_total = htr::model_cost(all_c).total_params;
  std::cout << std::left << std::setw(20) << "baseline (all C)" << std::right
            << std::setw(12) << base_total << std::setw(12)
            << htr::kBaselineReferenceTotal << std::setw(12)
            << static_cast<std::int64_t>(base_total) -
                   static_cast<std::int64_t>(htr::kBaselineReferenceTotal)
            << "\n";
  const std::int64_t ship_delta =
      static_cast<std::int64_t>(htr::layout_variants()[0].reference_total) -
      static_cast<std::int64_t>(htr::kBaselineReferenceTotal);
  std::cout << "shipped layout vs baseline, reference totals: " << ship_delta << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Handwritten text line recognition toolkit"};
  app.require_subcommand(1);
  app.set_config("--config", "", "Config file; explicit flags win over its values");

  // preprocess
  std::string pp_input, pp_out;
  std::size_t pp_h = 128, pp_w = 1024;
  bool pp_dump = false;
  CLI::App* cmd_pp = app.add_subcommand("preprocess", "Run the image pipeline on one PGM");
  cmd_pp->add_option("--input", pp_input, "Input PGM (P5) line image")->required();
  cmd_pp->add_option("--out", pp_out, "Output PGM for the normalized image")->required();
  cmd_pp->add_option("--target-h", pp_h, "Normalized height")->capture_default_str();
  cmd_pp->add_option("--target-w", pp_w, "Normalized width")->capture_default_str();
  cmd_pp->add_flag("--dump-stages", pp_dump, "Also write every intermediate stage");

  // gen-data
  std::string gd_out;
  std::uint64_t gd_seed = 0;
  CLI::App* cmd_gd = app.add_subcommand("gen-data", "Generate the synthetic micro corpus");
  cmd_gd->add_option("--out", gd_out, "Output dataset directory")->required();
  cmd_gd->add_option("--seed", gd_seed, "Generator seed")->capture_default_str();

  // train
  std::string tr_data, tr_out, tr_model = "micro";
  htr::TrainConfig tr_cfg;
  bool tr_no_augment = false;
  CLI::App* cmd_tr = app.add_subcommand("train", "Train a model on a dataset directory");
  cmd_tr->add_option("--data-dir", tr_data, "Dataset directory (train/valid/test.tsv)")
      ->envname("HTR_DATA_DIR")
      ->required();
  cmd_tr->add_option("--out", tr_out, "Output directory (checkpoint, history)")
      ->required();
  cmd_tr->add_option("--model", tr_model, "Architecture: micro or reference")
      ->check(CLI::IsMember({"micro", "reference"}))
      ->capture_default_str();
  cmd_tr->add_option("--seed", tr_cfg.seed, "Training seed")->capture_default_str();
  cmd_tr->add_option("--epochs", tr_cfg.epochs, "Epoch cap")->capture_default_str();
  cmd_tr->add_option("--batch", tr_cfg.batch, "Batch size")->capture_default_str();
  cmd_tr->add_option("--lr", tr_cfg.lr, "Initial learning rate")->capture_default_str();
  cmd_tr->add_option("--stop-tol", tr_cfg.stop_tolerance,
                     "Epochs without improvement before stopping")
      ->capture_default_str();
  cmd_tr->add_option("--reduce-tol", tr_cfg.reduce_tolerance,
                     "Epochs without improvement before cutting the learning rate")
      ->capture_default_str();
  cmd_tr->add_option("--reduce-factor", tr_cfg.reduce_factor, "Learning-rate factor")
      ->capture_default_str();
  cmd_tr->add_option("--threads", tr_cfg.threads, "Worker threads")
      ->capture_default_str();
  cmd_tr->add_flag("--no-augment", tr_no_augment, "Disable training-time augmentation");

  // predict
  std::string pr_ckpt, pr_image, pr_data, pr_mode = "NGrams", pr_gt;
  std::size_t pr_bw = 50;
  double pr_smooth = 0.01;
  CLI::App* cmd_pr = app.add_subcommand("predict", "Decode one line image");
  cmd_pr->add_option("--checkpoint", pr_ckpt, "Trained model checkpoint")->required();
  cmd_pr->add_option("--image", pr_image, "Input PGM line image")->required();
  cmd_pr->add_option("--data-dir", pr_data,
                     "Dataset directory supplying charset and decoder corpus")
      ->envname("HTR_DATA_DIR")
      ->required();
  cmd_pr->add_option("--bw", pr_bw, "Beam width")->capture_default_str();
  cmd_pr->add_option("--mode", pr_mode, "Decoder mode: Words or NGrams")
      ->capture_default_str();
  cmd_pr->add_option("--smooth", pr_smooth, "Language-model additive smoothing")
      ->capture_default_str();
  cmd_pr->add_option("--gt", pr_gt, "Ground-truth transcript for CER/WER");

  // evaluate
  std::string ev_gt, ev_hyp, ev_ckpt, ev_data, ev_mode = "NGrams", ev_split = "test";
  std::string ev_out;
  std::size_t ev_bw = 50, ev_threads = 1;
  double ev_smooth = 0.01;
  CLI::App* cmd_ev = app.add_subcommand(
      "evaluate", "Score hypotheses against ground truth (files or a checkpoint)");
  cmd_ev->add_option("--gt", ev_gt, "Ground-truth text file, one line per sample");
  cmd_ev->add_option("--hyp", ev_hyp, "Hypothesis text file, line-aligned with --gt");
  cmd_ev->add_option("--checkpoint", ev_ckpt, "Trained checkpoint to run instead");
  cmd_ev->add_option("--data-dir", ev_data, "Dataset directory for checkpoint mode")
      ->envname("HTR_DATA_DIR");
  cmd_ev->add_option("--split", ev_split, "Split to evaluate in checkpoint mode")
      ->check(CLI::IsMember({"train", "valid", "test"}))
      ->capture_default_str();
  cmd_ev->add_option("--bw", ev_bw, "Beam width")->capture_default_str();
  cmd_ev->add_option("--mode", ev_mode, "Decoder mode: Words or NGrams")
      ->capture_default_str();
  cmd_ev->add_option("--smooth", ev_smooth, "Language-model additive smoothing")
      ->capture_default_str();
  cmd_ev->add_option("--threads", ev_threads, "Worker threads")->capture_default_str();
  cmd_ev->add_option("--out", ev_out, "Also write the report to this file");

  // cost
  std::string co_layout;
  std::size_t co_charset = 97;
  bool co_variants = false;
  CLI::App* cmd_co = app.add_subcommand("cost", "Parameter and multiplication counts");
  cmd_co->add_option("--layout", co_layout,
                     "Block layout such as C--C--C--D--D--C (default: shipped layout)");
  cmd_co->add_option("--charset-size", co_charset, "Output alphabet size (no blank)")
      ->capture_default_str();
  cmd_co->add_flag("--variants", co_variants,
                   "Print the six-layout comparison against reference totals");

  // anova
  std::string an_input;
  CLI::App* cmd_an = app.add_subcommand(
      "anova", "One-way ANOVA; input CSV has one group of measurements per line");
  cmd_an->add_option("--input", an_input, "CSV file, one comma-separated group per line")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (*cmd_pp) {
      htr::PreprocConfig cfg;
      cfg.target_h = pp_h;
      cfg.target_w = pp_w;
      const htr::GrayImage input = htr::read_pgm(pp_input);
      const htr::PreprocStages stages = htr::preprocess_line(input, cfg);
      htr::write_pgm(pp_out, tensor_to_image(stages.tensor));
      if (pp_dump) {
        const std::string stem = strip_pgm_suffix(pp_out);
        htr::write_pgm(stem + "_illuminated.pgm", stages.illuminated);
        htr::write_pgm(stem + "_binarized.pgm", stages.binarized);
        htr::write_pgm(stem + "_deslanted.pgm", stages.deslanted);
      }
      std::cerr << "wrote " << pp_out << "\n";
    } else if (*cmd_gd) {
      const htr::Partition part = htr::gen_micro_dataset(gd_out, gd_seed);
      std::cout << part.size_report() << "\n";
    } else if (*cmd_tr) {
      tr_cfg.augment = !tr_no_augment;
      const htr::Partition part = htr::load_partition(tr_data, tr_cfg.threads);
      std::cerr << part.size_report() << "\n";
      for (const std::string& d : part.diagnostics) std::cerr << "note: " << d << "\n";
      htr::ModelConfig mcfg = tr_model == "micro"
                                  ? htr::ModelConfig::micro(part.charset.size())
                                  : htr::ModelConfig::reference(part.charset.size());
      htr::Model model = htr::build_model(mcfg, tr_cfg.seed);
      const htr::TrainResult r = htr::train(model, part, tr_cfg, tr_out, &std::cerr);
      std::cout << "best epoch " << r.best_epoch << "  valid loss " << r.best_valid_loss
                << "\n";
      std::cout << "stopped: " << r.stop_reason << "\n";
      std::cout << "checkpoint " << r.checkpoint_path << "\n";
      std::cout << "history " << r.history_path << "\n";
    } else if (*cmd_pr) {
      const htr::Model model = htr::load_checkpoint(pr_ckpt);
      const htr::Partition part = htr::load_partition(pr_data);
      const DecoderBundle dec = build_decoder(part, pr_bw, pr_mode, pr_smooth);
      const htr::GrayImage img = htr::read_pgm(pr_image);
      const htr::Prediction p =
          htr::predict(model, img, dec.charset, dec.tree, dec.lm, dec.cfg);
      std::cout << "decoded:   " << p.text << "\n";
      std::cout << "score:     " << p.score << "\n";
      std::cout << "best-path: " << p.best_path << "\n";
      if (!pr_gt.empty()) {
        std::cout << std::fixed << std::setprecision(4);
        std::cout << "CER " << htr::cer(pr_gt, p.text) << "  WER "
                  << htr::wer(pr_gt, p.text) << "\n";
      }
    } else if (*cmd_ev) {
      std::ostringstream report;
      if (!ev_ckpt.empty()) {
        if (ev_data.empty())
          throw htr::ValidationError("evaluate: checkpoint mode needs --data-dir");
        const htr::Model model = htr::load_checkpoint(ev_ckpt);
        const htr::Partition part = htr::load_partition(ev_data, ev_threads);
        const DecoderBundle dec = build_decoder(part, ev_bw, ev_mode, ev_smooth);
        const std::vector<htr::Sample>& split = ev_split == "train" ? part.train
                                                : ev_split == "valid" ? part.valid
                                                                      : part.test;
        if (split.empty()) throw htr::ValidationError("evaluate: split is empty");
        std::vector<htr::Prediction> preds(split.size());
        htr::parallel_for(split.size(), ev_threads, [&](std::size_t i) {
          const htr::GrayImage img = htr::read_pgm(split[i].image_path);
          preds[i] = htr::predict(model, img, dec.charset, dec.tree, dec.lm, dec.cfg);
        });
        std::vector<htr::SampleEval> wbs_evals, bp_evals;
        for (std::size_t i = 0; i < split.size(); ++i) {
          wbs_evals.push_back(
              htr::evaluate_sample(split[i].id, split[i].transcript, preds[i].text));
          bp_evals.push_back(htr::evaluate_sample(split[i].id, split[i].transcript,
                                                  preds[i].best_path));
        }
        const htr::EvalReport wbs_report = htr::aggregate(std::move(wbs_evals));
        const htr::EvalReport bp_report = htr::aggregate(std::move(bp_evals));
        report << htr::format_sample_lines(wbs_report);
        report << "-- lexicon decoding --\n" << htr::format_eval_report(wbs_report);
        report << "-- best path --\n" << htr::format_eval_report(bp_report);
      } else {
        if (ev_gt.empty() || ev_hyp.empty())
          throw htr::ValidationError("evaluate: need --gt and --hyp, or --checkpoint");
        const auto gt_lines = htr::split_lines(htr::read_text_file(ev_gt));
        const auto hyp_lines = htr::split_lines(htr::read_text_file(ev_hyp));
        if (gt_lines.size() != hyp_lines.size())
          throw htr::ValidationError("evaluate: --gt and --hyp line counts differ");
        std::vector<htr::SampleEval> evals;
        for (std::size_t i = 0; i < gt_lines.size(); ++i)
          evals.push_back(htr::evaluate_sample("line" + std::to_string(i + 1),
                                               gt_lines[i], hyp_lines[i]));
        const htr::EvalReport rep = htr::aggregate(std::move(evals));
        report << htr::format_sample_lines(rep) << htr::format_eval_report(rep);
      }
      std::cout << report.str();
      if (!ev_out.empty()) htr::write_text_file(ev_out, report.str());
    } else if (*cmd_co) {
      if (co_variants) {
        print_variant_report(co_charset);
      } else {
        htr::ModelConfig cfg = htr::ModelConfig::reference(co_charset);
        if (!co_layout.empty()) cfg.apply_layout(co_layout);
        std::cout << "layout " << cfg.layout() << "\n";
        print_cost_table(htr::model_cost(cfg));
      }
    } else if (*cmd_an) {
      std::vector<std::vector<double>> groups;
      for (const std::string& line : htr::split_lines(htr::read_text_file(an_input))) {
        if (htr::trim(line).empty()) continue;
        std::vector<double> group;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
          const std::string t = htr::trim(cell);
          if (t.empty()) continue;
          try {
            group.push_back(std::stod(t));
          } catch (const std::exception&) {
            throw htr::ValidationError("anova: bad number '" + t + "'");
          }
        }
        if (!group.empty()) groups.push_back(std::move(group));
      }
      std::cout << htr::format_anova(htr::anova_one_way(groups));
    }
  } catch (const htr::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const htr::RuntimeFailure& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
