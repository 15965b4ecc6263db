#pragma once

// Flat key = value run configuration with '#' comments. Keys are grouped by
// prefix (model.lr, split.kind, ...) and must be known.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace pbench {

class RunConfig {
 public:
  /// Every known key with its default value ("" means unset).
  static const std::map<std::string, std::string>& defaults();

  /// Parses `key = value` lines. Throws E_CONFIG on unknown keys or bad lines.
  void merge_text(const std::string& text, const std::string& origin);
  void merge_file(const std::filesystem::path& path);
  /// "key=value" from the command line.
  void set(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  const std::string& get(const std::string& key) const;
  bool has(const std::string& key) const { return !get(key).empty(); }
  /// Like get but throws E_CONFIG when the value is empty.
  const std::string& require(const std::string& key) const;
  double get_double(const std::string& key) const;
  long long get_int(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<std::string> get_list(const std::string& key) const;

  /// All keys, defaults included, sorted.
  std::string resolved() const;

 private:
  std::map<std::string, std::string> values_ = defaults();
};

}  // namespace pbench
