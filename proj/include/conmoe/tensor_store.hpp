// Copyright (c) 2026 conmoe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>

#include "conmoe/analysis.hpp"
#include "conmoe/calibration.hpp"
#include "conmoe/moe_model.hpp"
#include "conmoe/plan.hpp"

namespace conmoe {

// Checkpoint container (.mckpt):
//   one line of canonical JSON header, '\n',
//   u64 little-endian payload length in bytes,
//   payload of little-endian f32 tensors at the header's byte offsets.
// Tensor names: layers.{l}.experts.{i}.{gate|up|down} and layers.{l}.router.
inline constexpr std::string_view kCheckpointMagic = "MCKPT1";
inline constexpr int kCheckpointVersion = 1;

std::string checkpoint_bytes(const MoEModel& model);
MoEModel parse_checkpoint(std::string_view bytes);

void write_checkpoint(const MoEModel& model, const std::filesystem::path& path);
MoEModel read_checkpoint(const std::filesystem::path& path);

// Canonical JSON: sorted keys, fixed indentation, (layer, index) array order.
std::string plan_to_json(const ConsolidationPlan& plan);
ConsolidationPlan plan_from_json(std::string_view text);
void write_plan(const ConsolidationPlan& plan, const std::filesystem::path& path);
ConsolidationPlan read_plan(const std::filesystem::path& path);

std::string stats_to_json(const CalibStats& stats);
CalibStats stats_from_json(std::string_view text);
void write_stats(const CalibStats& stats, const std::filesystem::path& path);
CalibStats read_stats(const std::filesystem::path& path);

std::string report_to_json(const FidelityReport& report);
std::string sweep_to_json(std::span<const SweepRow> rows, double rho, const Metadata& metadata = {});

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view content);

}  // namespace conmoe
