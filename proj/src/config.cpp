#include "osev/config.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

namespace osev::config {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool valid_key(const std::string& key) {
  if (key.empty()) return false;
  for (char c : key) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.')) return false;
  }
  return true;
}

}  // namespace

KeyValues KeyValues::parse(const std::string& text, const std::string& source) {
  KeyValues kv;
  kv.source_ = source;
  std::istringstream in(text);
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string body = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = source + ":" + std::to_string(line) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    if (!valid_key(key)) throw ConfigError(where + "invalid key '" + key + "'");
    if (kv.entries_.count(key) != 0) {
      throw ConfigError(where + "duplicate key '" + key + "' (first on line " +
                        std::to_string(kv.entries_[key].line) + ")");
    }
    kv.entries_[key] = {value, line};
  }
  return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

const KeyValues::Entry* KeyValues::find(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) return nullptr;
  used_[key] = true;
  return &it->second;
}

void KeyValues::bad_value(const std::string& key, const Entry& e, const char* type) const {
  throw ConfigError(source_ + ":" + std::to_string(e.line) + ": " + key + " = '" + e.value +
                    "' is not a valid " + type);
}

std::string KeyValues::get_string(const std::string& key, const std::string& fallback) const {
  const Entry* e = find(key);
  return e ? e->value : fallback;
}

double KeyValues::get_double(const std::string& key, double fallback) const {
  const Entry* e = find(key);
  if (!e) return fallback;
  double v = 0.0;
  const char* end = e->value.data() + e->value.size();
  const auto [p, ec] = std::from_chars(e->value.data(), end, v);
  if (ec != std::errc() || p != end) bad_value(key, *e, "number");
  return v;
}

std::uint64_t KeyValues::get_u64(const std::string& key, std::uint64_t fallback) const {
  const Entry* e = find(key);
  if (!e) return fallback;
  std::uint64_t v = 0;
  const char* end = e->value.data() + e->value.size();
  const auto [p, ec] = std::from_chars(e->value.data(), end, v);
  if (ec != std::errc() || p != end) bad_value(key, *e, "non-negative integer");
  return v;
}

std::size_t KeyValues::get_size(const std::string& key, std::size_t fallback) const {
  return static_cast<std::size_t>(get_u64(key, fallback));
}

bool KeyValues::get_bool(const std::string& key, bool fallback) const {
  const Entry* e = find(key);
  if (!e) return fallback;
  if (e->value == "true" || e->value == "1") return true;
  if (e->value == "false" || e->value == "0") return false;
  bad_value(key, *e, "boolean (true/false)");
}

void KeyValues::set(const std::string& key, const std::string& value) {
  auto& e = entries_[key];
  e.value = value;
}

std::vector<std::string> KeyValues::unused() const {
  std::vector<std::string> out;
  for (const auto& [key, e] : entries_) {
    if (!used_.count(key)) out.push_back(key);
  }
  return out;
}

void KeyValues::require_all_used() const {
  const auto keys = unused();
  if (keys.empty()) return;
  std::string msg = source_ + ": unknown key(s):";
  for (const auto& k : keys) msg += " " + k;
  throw ConfigError(msg);
}

}  // namespace osev::config
