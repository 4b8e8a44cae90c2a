#pragma once

#include <functional>
#include <string>

namespace semfed {

// Tiny warning channel: library code reports recoverable oddities (skipped
// nodes, dropped clients) without committing callers to a logging framework.
using LogSink = std::function<void(const std::string&)>;

void set_log_sink(LogSink sink);  // empty sink restores the stderr default
void log_warn(const std::string& msg);

}  // namespace semfed
