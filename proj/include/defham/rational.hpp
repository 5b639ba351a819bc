#pragma once

// Exact rational scalars shared by the expression and forms layers.

#include <boost/multiprecision/cpp_int.hpp>

#include <cctype>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace defham {

using Rational = boost::multiprecision::cpp_rational;
using BigInt = boost::multiprecision::cpp_int;

inline bool is_integer(const Rational& r) { return denominator(r) == 1; }

inline double to_double(const Rational& r) { return r.convert_to<double>(); }

/// "3", "-3/4", "1/2". No whitespace.
inline std::string to_string(const Rational& r) {
    std::string s = numerator(r).str();
    if (denominator(r) != 1) s += "/" + denominator(r).str();
    return s;
}

/// Parses an unsigned decimal literal `digits ['.' digits] [e [+-] digits]`
/// exactly. Returns the number of bytes consumed (0 if no literal starts at
/// `text`).
inline std::size_t parse_decimal(std::string_view text, Rational& out) {
    std::size_t i = 0;
    auto digit = [&](std::size_t k) { return k < text.size() && std::isdigit(static_cast<unsigned char>(text[k])); };
    if (!digit(0)) return 0;
    BigInt mantissa = 0;
    int scale = 0;
    while (digit(i)) mantissa = mantissa * 10 + (text[i++] - '0');
    if (i < text.size() && text[i] == '.' && digit(i + 1)) {
        ++i;
        while (digit(i)) {
            mantissa = mantissa * 10 + (text[i++] - '0');
            --scale;
        }
    }
    if (i < text.size() && (text[i] == 'e' || text[i] == 'E')) {
        std::size_t j = i + 1;
        bool negative = false;
        if (j < text.size() && (text[j] == '+' || text[j] == '-')) negative = text[j++] == '-';
        if (digit(j)) {
            int e = 0;
            while (digit(j)) {
                e = e * 10 + (text[j++] - '0');
                if (e > 4000) throw std::invalid_argument("decimal exponent too large");
            }
            scale += negative ? -e : e;
            i = j;
        }
    }
    Rational value(mantissa);
    BigInt ten = 10;
    BigInt power = 1;
    for (int k = 0; k < (scale < 0 ? -scale : scale); ++k) power *= ten;
    out = scale < 0 ? value / Rational(power) : value * Rational(power);
    return i;
}

/// Parses "p", "-p", "p/q" or a decimal literal ("0.25", "-1e-3") exactly.
inline Rational parse_rational(std::string_view text) {
    bool negative = false;
    std::size_t pos = 0;
    if (!text.empty() && (text[0] == '-' || text[0] == '+')) {
        negative = text[0] == '-';
        pos = 1;
    }
    Rational value;
    std::size_t used = parse_decimal(text.substr(pos), value);
    if (used == 0) throw std::invalid_argument("not a rational: '" + std::string(text) + "'");
    pos += used;
    if (pos < text.size() && text[pos] == '/') {
        Rational den;
        std::size_t dused = parse_decimal(text.substr(pos + 1), den);
        if (dused == 0) throw std::invalid_argument("not a rational: '" + std::string(text) + "'");
        if (den == 0) throw std::invalid_argument("zero denominator: '" + std::string(text) + "'");
        value /= den;
        pos += 1 + dused;
    }
    if (pos != text.size()) throw std::invalid_argument("not a rational: '" + std::string(text) + "'");
    return negative ? Rational(-value) : value;
}

/// Narrows to int64, throwing when the value does not fit.
inline std::int64_t to_int64(const BigInt& v) {
    if (v > BigInt(INT64_MAX) || v < BigInt(INT64_MIN))
        throw std::overflow_error("integer does not fit in 64 bits: " + v.str());
    return v.convert_to<std::int64_t>();
}

}  // namespace defham
