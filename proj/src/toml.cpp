#include "corereft/toml.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <set>
#include <vector>

#include "corereft/error.hpp"

namespace corereft::toml {

namespace {

class Parser {
public:
    explicit Parser(std::string_view text) : s_(text) {}

    Document run() {
        Document root = Document::object();
        Document* table = &root;
        std::string table_name;
        while (true) {
            skip_ws_and_newlines();
            if (eof()) break;
            if (peek() == '[') {
                ++pos_;
                std::vector<std::string> path = key_path(']');
                expect(']');
                end_of_line();
                table = &root;
                table_name.clear();
                for (const auto& part : path) {
                    table_name += (table_name.empty() ? "" : ".") + part;
                    auto& next = (*table)[part];
                    if (next.is_null()) next = Document::object();
                    if (!next.is_object()) fail("'" + table_name + "' is not a table");
                    table = &next;
                }
                if (!headers_.insert(table_name).second) fail("table [" + table_name + "] defined twice");
                continue;
            }
            std::vector<std::string> path = key_path('=');
            skip_ws();
            expect('=');
            skip_ws();
            Document value = parse_value();
            end_of_line();
            Document* target = table;
            for (std::size_t i = 0; i + 1 < path.size(); ++i) {
                auto& next = (*target)[path[i]];
                if (next.is_null()) next = Document::object();
                if (!next.is_object()) fail("'" + path[i] + "' is not a table");
                target = &next;
            }
            if (target->contains(path.back())) fail("duplicate key '" + path.back() + "'");
            (*target)[path.back()] = std::move(value);
        }
        return root;
    }

private:
    std::string_view s_;
    std::size_t pos_ = 0;
    std::size_t line_ = 1;
    std::set<std::string> headers_;

    bool eof() const { return pos_ >= s_.size(); }
    char peek() const { return eof() ? '\0' : s_[pos_]; }

    [[noreturn]] void fail(const std::string& what) const {
        throw ConfigError("", "line " + std::to_string(line_) + ": " + what);
    }

    void expect(char c) {
        if (peek() != c) fail(std::string("expected '") + c + "'");
        ++pos_;
    }

    void skip_ws() {
        while (!eof() && (peek() == ' ' || peek() == '\t')) ++pos_;
    }

    void skip_comment() {
        if (peek() == '#')
            while (!eof() && peek() != '\n') ++pos_;
    }

    void skip_ws_and_newlines() {
        while (!eof()) {
            skip_ws();
            skip_comment();
            if (peek() == '\r') {
                ++pos_;
            } else if (peek() == '\n') {
                ++pos_;
                ++line_;
            } else {
                break;
            }
        }
    }

    void end_of_line() {
        skip_ws();
        skip_comment();
        if (peek() == '\r') ++pos_;
        if (eof()) return;
        if (peek() != '\n') fail("unexpected text after value");
        ++pos_;
        ++line_;
    }

    std::vector<std::string> key_path(char terminator) {
        std::vector<std::string> out;
        while (true) {
            skip_ws();
            if (peek() == '"') {
                ++pos_;
                out.push_back(basic_string_body());
            } else {
                std::string key;
                while (!eof() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' ||
                                  peek() == '-')) {
                    key += peek();
                    ++pos_;
                }
                if (key.empty()) fail("expected a key");
                out.push_back(key);
            }
            skip_ws();
            if (peek() == '.') {
                ++pos_;
                continue;
            }
            if (peek() != terminator) fail(std::string("expected '") + terminator + "' after key");
            return out;
        }
    }

    std::string basic_string_body() {
        std::string out;
        while (true) {
            if (eof() || peek() == '\n') fail("unterminated string");
            const char c = s_[pos_++];
            if (c == '"') return out;
            if (c != '\\') {
                out += c;
                continue;
            }
            if (eof()) fail("unterminated escape");
            const char e = s_[pos_++];
            switch (e) {
                case '"': out += '"'; break;
                case '\\': out += '\\'; break;
                case 'n': out += '\n'; break;
                case 't': out += '\t'; break;
                case 'r': out += '\r'; break;
                default: fail(std::string("unsupported escape \\") + e);
            }
        }
    }

    Document parse_value() {
        const char c = peek();
        if (c == '"') {
            ++pos_;
            return basic_string_body();
        }
        if (c == '\'') {
            ++pos_;
            std::string out;
            while (peek() != '\'') {
                if (eof() || peek() == '\n') fail("unterminated literal string");
                out += s_[pos_++];
            }
            ++pos_;
            return out;
        }
        if (c == '[') {
            ++pos_;
            Document arr = Document::array();
            while (true) {
                skip_ws_and_newlines();
                if (peek() == ']') {
                    ++pos_;
                    return arr;
                }
                arr.push_back(parse_value());
                skip_ws_and_newlines();
                if (peek() == ',') {
                    ++pos_;
                    continue;
                }
                if (peek() != ']') fail("expected ',' or ']' in array");
            }
        }
        std::string tok;
        while (!eof() && !std::isspace(static_cast<unsigned char>(peek())) && peek() != ',' &&
               peek() != ']' && peek() != '#') {
            tok += peek();
            ++pos_;
        }
        if (tok == "true") return true;
        if (tok == "false") return false;
        if (tok.empty()) fail("missing value");
        std::string clean;
        for (char ch : tok)
            if (ch != '_') clean += ch;
        const bool is_float = clean.find_first_of(".eE") != std::string::npos;
        if (!is_float) {
            std::int64_t v = 0;
            const char* first = clean.data() + (clean[0] == '+' ? 1 : 0);
            auto [p, ec] = std::from_chars(first, clean.data() + clean.size(), v);
            if (ec != std::errc() || p != clean.data() + clean.size()) fail("bad value '" + tok + "'");
            return v;
        }
        double v = 0.0;
        const char* first = clean.data() + (clean[0] == '+' ? 1 : 0);
        auto [p, ec] = std::from_chars(first, clean.data() + clean.size(), v);
        if (ec != std::errc() || p != clean.data() + clean.size() || !std::isfinite(v)) {
            fail("bad number '" + tok + "'");
        }
        return v;
    }
};

bool bare_key(const std::string& k) {
    if (k.empty()) return false;
    for (char c : k)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') return false;
    return true;
}

std::string quote(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        switch (c) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\t': out += "\\t"; break;
            case '\r': out += "\\r"; break;
            default: out += c;
        }
    }
    return out + "\"";
}

std::string key_text(const std::string& k) { return bare_key(k) ? k : quote(k); }

std::string scalar(const Document& v) {
    if (v.is_string()) return quote(v.get<std::string>());
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
    if (v.is_number_float()) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v.get<double>());
        std::string s = buf;
        if (s.find_first_of(".eE") == std::string::npos) s += ".0";
        return s;
    }
    if (v.is_array()) {
        std::string out = "[";
        for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + scalar(v[i]);
        return out + "]";
    }
    throw ConfigError("", "value cannot be written as TOML");
}

void dump_table(const Document& t, const std::string& prefix, std::string& out) {
    for (auto it = t.begin(); it != t.end(); ++it)
        if (!it->is_object()) out += key_text(it.key()) + " = " + scalar(*it) + "\n";
    for (auto it = t.begin(); it != t.end(); ++it) {
        if (!it->is_object()) continue;
        const std::string name = prefix.empty() ? key_text(it.key()) : prefix + "." + key_text(it.key());
        out += "\n[" + name + "]\n";
        dump_table(*it, name, out);
    }
}

}  // namespace

Document parse(std::string_view text) { return Parser(text).run(); }

std::string dump(const Document& doc) {
    std::string out;
    dump_table(doc, "", out);
    return out;
}

}  // namespace corereft::toml
