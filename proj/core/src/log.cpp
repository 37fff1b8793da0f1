#include "sparseformer/log.hpp"

#include <cstdio>
#include <mutex>
#include <set>

namespace spf::log {

namespace {
std::mutex g_mutex;
std::set<std::string>& seen_keys() {
  static std::set<std::string> keys;
  return keys;
}
}  // namespace

void info(const std::string& msg) {
  std::lock_guard<std::mutex> lock(g_mutex);
  std::fprintf(stderr, "[info] %s\n", msg.c_str());
}

void warn(const std::string& msg) {
  std::lock_guard<std::mutex> lock(g_mutex);
  std::fprintf(stderr, "[warn] %s\n", msg.c_str());
}

void warn_once(const std::string& key, const std::string& msg) {
  std::lock_guard<std::mutex> lock(g_mutex);
  if (seen_keys().insert(key).second) {
    std::fprintf(stderr, "[warn] %s\n", msg.c_str());
  }
}

}  // namespace spf::log
