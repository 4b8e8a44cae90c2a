#include "semfed/log.hpp"

#include <cstdio>
#include <utility>

namespace semfed {

namespace {
LogSink g_sink;
}

void set_log_sink(LogSink sink) { g_sink = std::move(sink); }

void log_warn(const std::string& msg) {
    if (g_sink) {
        g_sink(msg);
    } else {
        std::fprintf(stderr, "[semfed] %s\n", msg.c_str());
    }
}

}  // namespace semfed
