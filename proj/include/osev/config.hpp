#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace osev::config {

// Flat key = value text. Grammar, one entry per line:
//
//   line    := blank | comment | entry
//   comment := optional spaces, '#', anything
//   entry   := key '=' value [ '#' comment ]
//   key     := [A-Za-z0-9_.]+
//
// Surrounding whitespace is trimmed from keys and values. Duplicate keys are
// an error. Values are typed on access.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& source = "<string>");
  static KeyValues load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  const std::string& source() const { return source_; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  void set(const std::string& key, const std::string& value);
  // Keys that were never read by a getter.
  std::vector<std::string> unused() const;
  // Throws ConfigError listing every unread key.
  void require_all_used() const;

 private:
  struct Entry {
    std::string value;
    std::size_t line = 0;
  };
  const Entry* find(const std::string& key) const;
  [[noreturn]] void bad_value(const std::string& key, const Entry& e, const char* type) const;

  std::string source_;
  std::map<std::string, Entry> entries_;
  mutable std::map<std::string, bool> used_;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace osev::config
