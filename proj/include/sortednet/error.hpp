#pragma once

#include <stdexcept>
#include <string>

namespace sortednet {

// All library errors carry a short machine-parsable class string next to the
// human-readable message. The CLI prints them as "error[<class>]: <message>".
class SnError : public std::runtime_error {
public:
    SnError(std::string cls, const std::string& message)
        : std::runtime_error(message), cls_(std::move(cls)) {}

    const std::string& error_class() const { return cls_; }

private:
    std::string cls_;
};

[[noreturn]] inline void sn_fail(const std::string& cls, const std::string& message) {
    throw SnError(cls, message);
}

} // namespace sortednet
