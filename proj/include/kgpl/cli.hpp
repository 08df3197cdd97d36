// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end and the evaluation / comparison reports behind it.
//
//   kgpl phantoms --spec <file> --count <n> --out <dir>
//   kgpl pretrain --backbone {unet|unetr|swin} --stage {tissue|structure} --config <file>
//   kgpl finetune --init {knowledge|random|full} --ckpt <path> --config <file>
//   kgpl evaluate --tissue-ckpt <p> --structure-ckpt <p> --data <dir> --out report.{json,csv}
//   kgpl compare --reports a.json b.json --out delta.json
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#pragma once

#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kgpl/data.hpp"
#include "kgpl/train.hpp"

namespace kgpl {

/// Display names for tissue classes (background, CSF, GM, WM for three
/// tissues) and for structures (tissue name plus sector number).
std::vector<std::string> tissue_class_names(const PhantomSpec& spec);
std::vector<std::string> structure_class_names(const PhantomSpec& spec);

/// Runs the cascade on the test split and tabulates per-class DSC and ASD per
/// subject, per class (mean over subjects) and on average (mean over
/// classes). Throws BadConfig for an empty test split.
nlohmann::json evaluate_report(const LoadedCheckpoint& tissue, const LoadedCheckpoint& structure, const Dataset& data);

/// CSV rendering of an evaluation report; values use 17 significant digits.
std::string report_csv(const nlohmann::json& report);

/// Per-class differences (b - a) with a paired t-test over subjects, plus the
/// same for the per-subject class average. Throws MismatchedClasses when the
/// tasks, classes or subjects differ.
nlohmann::json compare_reports(const nlohmann::json& a, const nlohmann::json& b);

namespace cli {

/// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cli

}  // namespace kgpl
