#pragma once

#include <filesystem>
#include <map>
#include <string>

namespace mno {

/// Flat key=value text. Lines starting with '#' and blank lines are ignored;
/// keys are unique and written in sorted order.
class Manifest {
 public:
  void set(const std::string& key, const std::string& value);
  template <typename V>
  void set_num(const std::string& key, V value) {
    set(key, format_number(value));
  }
  bool has(const std::string& key) const { return kv_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  const std::map<std::string, std::string>& entries() const { return kv_; }
  void merge(const Manifest& other);

  std::string serialize() const;
  static Manifest parse(const std::string& text);
  static Manifest load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  static std::string format_number(double v);
  static std::string format_number(long long v) { return std::to_string(v); }
  static std::string format_number(unsigned long long v) { return std::to_string(v); }
  static std::string format_number(int v) { return std::to_string(v); }
  static std::string format_number(unsigned v) { return std::to_string(v); }
  static std::string format_number(long v) { return std::to_string(v); }
  static std::string format_number(unsigned long v) { return std::to_string(v); }

 private:
  std::map<std::string, std::string> kv_;
};

/// FNV-1a 64-bit digest of a file's bytes, as 16 hex digits.
std::string file_digest(const std::filesystem::path& path);

}  // namespace mno
