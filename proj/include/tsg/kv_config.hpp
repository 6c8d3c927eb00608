#pragma once

#include <filesystem>
#include <map>
#include <string>

namespace tsg {

/// Flat `key = value` text config. '#' starts a comment.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text,
                              const std::string& origin = "<config>");
  static KeyValueConfig load(const std::filesystem::path& path);

  bool contains(const std::string& key) const { return values_.contains(key); }
  void set(const std::string& key, std::string value);

  const std::string& get(const std::string& key) const;
  double get_double(const std::string& key) const;
  long long get_int(const std::string& key) const;

  // Line where the key was defined, 0 when set programmatically.
  int line_of(const std::string& key) const;
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string to_string() const;

 private:
  std::string origin_ = "<config>";
  std::map<std::string, std::string> values_;
  std::map<std::string, int> lines_;
};

}  // namespace tsg
