#pragma once

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "vcmamba/model.hpp"
#include "vcmamba/tensor.hpp"

namespace vcm {

// Flat `key = value` text grouped under `[section]` headers. `#` and `;`
// start comments; keys before the first header land in section "".
class ConfigDocument {
 public:
  using Section = std::map<std::string, std::string>;

  static ConfigDocument parse(std::string_view text) {
    ConfigDocument doc;
    std::string current;
    doc.sections_[current];
    std::size_t line_no = 0;
    std::istringstream in{std::string(text)};
    std::string raw;
    while (std::getline(in, raw)) {
      ++line_no;
      std::string line = strip(cut_comment(raw));
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']' || line.size() < 3) {
          throw ValidationError("config line " + std::to_string(line_no) +
                                ": malformed section header '" + line + "'");
        }
        current = strip(line.substr(1, line.size() - 2));
        doc.sections_[current];
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ValidationError("config line " + std::to_string(line_no) +
                              ": expected key = value, got '" + line + "'");
      }
      std::string key = strip(line.substr(0, eq));
      std::string value = strip(line.substr(eq + 1));
      if (key.empty()) {
        throw ValidationError("config line " + std::to_string(line_no) +
                              ": empty key");
      }
      auto& section = doc.sections_[current];
      if (section.count(key)) {
        throw ValidationError("config line " + std::to_string(line_no) +
                              ": duplicate key '" + key + "' in [" + current +
                              "]");
      }
      section.emplace(std::move(key), std::move(value));
    }
    return doc;
  }

  static ConfigDocument load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ValidationError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  bool has_section(const std::string& name) const { return sections_.count(name) > 0; }

  const Section& section(const std::string& name) const {
    static const Section empty;
    auto it = sections_.find(name);
    return it == sections_.end() ? empty : it->second;
  }

  const std::map<std::string, Section>& sections() const { return sections_; }

  static std::string strip(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
  }

 private:
  static std::string cut_comment(const std::string& s) {
    const auto pos = s.find_first_of("#;");
    return pos == std::string::npos ? s : s.substr(0, pos);
  }

  std::map<std::string, Section> sections_;
};

namespace config {

inline std::size_t to_size(const std::string& key, const std::string& value) {
  std::size_t out = 0;
  const auto* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ValidationError("config key '" + key + "': '" + value +
                          "' is not a non-negative integer");
  }
  return out;
}

inline double to_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "': '" + value +
                          "' is not a number");
  }
}

inline std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(value);
  while (std::getline(in, item, ',')) out.push_back(ConfigDocument::strip(item));
  return out;
}

}  // namespace config

// `[model]` section: either `preset = <name>` with optional overrides, or a
// full inline description (channels, stage1..stage4, ...).
inline ModelSpec spec_from_section(const ConfigDocument::Section& section) {
  ModelSpec spec;
  if (auto it = section.find("preset"); it != section.end()) {
    spec = model_preset(it->second);
  } else if (!section.count("channels")) {
    throw ValidationError("[model] needs either 'preset' or 'channels'");
  }
  static const std::vector<std::string> known = {
      "preset",     "name",      "channels",         "stage1",
      "stage2",     "stage3",    "stage4",           "num_classes",
      "input_resolution",        "in_channels",      "ffn_ratio",
      "inner_expand",            "state_size",       "delta_rank"};
  for (const auto& [key, value] : section) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ValidationError("[model]: unknown key '" + key + "'");
    }
    if (key == "name") {
      spec.name = value;
    } else if (key == "channels") {
      const auto parts = config::split_list(value);
      if (parts.size() != kStageCount) {
        throw ValidationError("[model] channels: expected 4 comma-separated "
                              "widths, got '" + value + "'");
      }
      for (std::size_t s = 0; s < kStageCount; ++s) {
        spec.channels[s] = config::to_size(key, parts[s]);
      }
    } else if (key.size() == 6 && key.rfind("stage", 0) == 0 && key[5] >= '1' &&
               key[5] <= '4') {
      spec.stages[static_cast<std::size_t>(key[5] - '1')] =
          parse_stage_string(value == "-" ? "" : value);
    } else if (key == "num_classes") {
      spec.num_classes = config::to_size(key, value);
    } else if (key == "input_resolution") {
      spec.input_resolution = config::to_size(key, value);
    } else if (key == "in_channels") {
      spec.in_channels = config::to_size(key, value);
    } else if (key == "ffn_ratio") {
      spec.ffn_ratio = config::to_size(key, value);
    } else if (key == "inner_expand") {
      spec.inner_expand = config::to_size(key, value);
    } else if (key == "state_size") {
      spec.state_size = config::to_size(key, value);
    } else if (key == "delta_rank") {
      spec.delta_rank = config::to_size(key, value);
    }
  }
  spec.validate();
  return spec;
}

// Inverse of spec_from_section; emits a complete inline description.
inline std::string spec_to_text(const ModelSpec& spec) {
  std::ostringstream os;
  os << "[model]\n";
  os << "name = " << spec.name << '\n';
  os << "channels = " << spec.channels[0] << ',' << spec.channels[1] << ','
     << spec.channels[2] << ',' << spec.channels[3] << '\n';
  for (std::size_t s = 0; s < kStageCount; ++s) {
    const auto blocks = stage_string(spec.stages[s]);
    os << "stage" << s + 1 << " = " << (blocks.empty() ? "-" : blocks) << '\n';
  }
  os << "num_classes = " << spec.num_classes << '\n';
  os << "input_resolution = " << spec.input_resolution << '\n';
  os << "in_channels = " << spec.in_channels << '\n';
  os << "ffn_ratio = " << spec.ffn_ratio << '\n';
  os << "inner_expand = " << spec.inner_expand << '\n';
  os << "state_size = " << spec.state_size << '\n';
  os << "delta_rank = " << spec.delta_rank << '\n';
  return os.str();
}

inline ModelSpec spec_from_text(std::string_view text) {
  return spec_from_section(ConfigDocument::parse(text).section("model"));
}

}  // namespace vcm
