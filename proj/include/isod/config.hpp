#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"

#include "isod/controller.hpp"
#include "isod/deformation.hpp"

namespace isod {

using Json = nlohmann::json;

// JSON forms of the configuration types. Parsers reject unknown keys and
// report the offending field through ConfigError::path().

Json to_json(const RatePolicy& p);
RatePolicy policy_from_json(const Json& j, const std::string& path = "policy");

Json to_json(const FlowConfig& f);
FlowConfig flow_from_json(const Json& j, const std::string& path = "flow");

Json to_json(const SpeckleSpec& s);
SpeckleSpec speckle_from_json(const Json& j, const std::string& path = "speckle");

Json to_json(const RunConfig& c);
RunConfig run_config_from_json(const Json& j);
RunConfig load_run_config(const std::filesystem::path& path);

Json to_json(const Roi& r);  // [x0, y0, width, height]
Roi roi_from_json(const Json& j, const std::string& path = "roi");

Json to_json(const StrainStats& s);
StrainStats stats_from_json(const Json& j);

// Schedule file: [{"t": seconds, "map": {"kind": ...} or [{"kind": ...}, ...]}, ...]
// A single term object or an array of terms.
Json to_json(const DisplacementMap& m);
DisplacementMap map_from_json(const Json& j, const std::string& path = "map");

Json to_json(const DeformationSchedule& s);
DeformationSchedule schedule_from_json(const Json& j, const std::string& path = "schedule");
DeformationSchedule load_schedule(const std::filesystem::path& path);

Json read_json_file(const std::filesystem::path& path);

} // namespace isod
