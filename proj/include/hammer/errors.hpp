#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace hammer {

// Every failure raised by the library derives from Error; kind() is a stable
// machine-readable tag the CLI prints as the reason prefix.
class Error : public std::runtime_error {
public:
    Error(std::string_view kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    [[nodiscard]] std::string_view kind() const noexcept { return kind_; }

private:
    std::string_view kind_;
};

#define HAMMER_DEFINE_ERROR(Name, tag)                                         \
    class Name : public Error {                                                \
    public:                                                                    \
        explicit Name(const std::string& message) : Error(tag, message) {}     \
    };

HAMMER_DEFINE_ERROR(ShapeError, "shape")
HAMMER_DEFINE_ERROR(NumericError, "numeric")
HAMMER_DEFINE_ERROR(ContractError, "contract")
HAMMER_DEFINE_ERROR(IndexError, "index")
HAMMER_DEFINE_ERROR(ConfigError, "config")
HAMMER_DEFINE_ERROR(InputError, "input")
HAMMER_DEFINE_ERROR(AnnotationError, "annotation")
HAMMER_DEFINE_ERROR(LoadError, "load")

#undef HAMMER_DEFINE_ERROR

} // namespace hammer
