#pragma once

#include <string>

namespace spf::log {

void info(const std::string& msg);
void warn(const std::string& msg);

// Emits at most once per key per process; for conditions that can fire every
// forward pass (e.g. degenerate offset statistics).
void warn_once(const std::string& key, const std::string& msg);

}  // namespace spf::log
