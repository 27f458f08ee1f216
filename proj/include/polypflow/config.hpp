#pragma once

#include <array>
#include <fstream>
#include <map>
#include <sstream>

#include "polypflow/tensor.hpp"

namespace pf {

// Flat `key = value` configuration with dotted keys. Lines starting with '#'
// are comments.
class KeyValueConfig {
public:
    std::map<std::string, std::string> values;

    static std::string trim(const std::string& s) {
        auto a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return "";
        auto b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }

    static KeyValueConfig parse(std::istream& in) {
        KeyValueConfig cfg;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string t = trim(line);
            if (t.empty() || t[0] == '#') continue;
            auto eq = t.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error("config line " + std::to_string(lineno) +
                                         ": expected key = value");
            cfg.values[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
        }
        return cfg;
    }

    static KeyValueConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open config file: " + path);
        return parse(in);
    }

    std::string dump() const {
        std::ostringstream os;
        for (const auto& [k, v] : values) os << k << " = " << v << "\n";
        return os.str();
    }

    bool has(const std::string& k) const { return values.count(k) != 0; }
    void set(const std::string& k, const std::string& v) { values[k] = v; }

    std::string get_str(const std::string& k, const std::string& dflt) const {
        auto it = values.find(k);
        return it == values.end() ? dflt : it->second;
    }
    double get_double(const std::string& k, double dflt) const {
        auto it = values.find(k);
        return it == values.end() ? dflt : std::stod(it->second);
    }
    int get_int(const std::string& k, int dflt) const {
        auto it = values.find(k);
        return it == values.end() ? dflt : std::stoi(it->second);
    }
    bool get_bool(const std::string& k, bool dflt) const {
        auto it = values.find(k);
        if (it == values.end()) return dflt;
        const std::string& v = it->second;
        if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "off" || v == "no") return false;
        throw std::runtime_error("config key " + k + ": not a boolean: " + v);
    }
};

struct TrainConfig {
    int epochs = 100;
    int batch_size = 8;
    double lr = 1e-4;
    double weight_decay = 1e-2;
    int image_size = 352;
    int n_steps = 10;
    double lambda_fm = 1.0;
    bool use_attention = true;
    bool use_dct = true;
    bool detach_trajectory = false;
    bool augment = false;
    unsigned seed = 0;
    std::array<int, 4> widths = {64, 128, 256, 512};
    int attn_dim = 64;
    int token_stride = 8;
    int weight_window = 31;
    double weight_gain = 5.0;
    double z0_noise_std = 0.0;  // optional Gaussian perturbation of the prior

    void validate() const {
        if (epochs < 1 || batch_size < 1 || n_steps < 1 || image_size < 8)
            throw std::invalid_argument("train config: epochs, batch_size, n_steps, image_size "
                                        "must be positive");
        if (lr <= 0 && lr != 0.0) throw std::invalid_argument("train config: negative lr");
        if (image_size % 8 != 0 || image_size % token_stride != 0)
            throw std::invalid_argument(
                "train config: image_size must be divisible by 8 and by token_stride");
    }

    static TrainConfig from_kv(const KeyValueConfig& kv) {
        TrainConfig c;
        c.epochs = kv.get_int("train.epochs", c.epochs);
        c.batch_size = kv.get_int("train.batch_size", c.batch_size);
        c.lr = kv.get_double("train.lr", c.lr);
        c.weight_decay = kv.get_double("train.weight_decay", c.weight_decay);
        c.image_size = kv.get_int("data.image_size", c.image_size);
        c.n_steps = kv.get_int("ode.n_steps", c.n_steps);
        c.lambda_fm = kv.get_double("loss.lambda_fm", c.lambda_fm);
        c.use_attention = kv.get_bool("field.use_attention", c.use_attention);
        c.use_dct = kv.get_bool("field.use_dct", c.use_dct);
        c.detach_trajectory = kv.get_bool("train.detach_trajectory", c.detach_trajectory);
        c.augment = kv.get_bool("data.augment", c.augment);
        c.seed = static_cast<unsigned>(kv.get_int("train.seed", static_cast<int>(c.seed)));
        c.widths = {kv.get_int("model.c1", c.widths[0]), kv.get_int("model.c2", c.widths[1]),
                    kv.get_int("model.c3", c.widths[2]), kv.get_int("model.c4", c.widths[3])};
        c.attn_dim = kv.get_int("field.attn_dim", c.attn_dim);
        c.token_stride = kv.get_int("field.token_stride", c.token_stride);
        c.weight_window = kv.get_int("loss.weight_window", c.weight_window);
        c.weight_gain = kv.get_double("loss.weight_gain", c.weight_gain);
        c.z0_noise_std = kv.get_double("ode.z0_noise_std", c.z0_noise_std);
        return c;
    }

    KeyValueConfig to_kv() const {
        KeyValueConfig kv;
        auto num = [](double v) {
            std::ostringstream os;
            os.precision(17);
            os << v;
            return os.str();
        };
        kv.set("train.epochs", std::to_string(epochs));
        kv.set("train.batch_size", std::to_string(batch_size));
        kv.set("train.lr", num(lr));
        kv.set("train.weight_decay", num(weight_decay));
        kv.set("data.image_size", std::to_string(image_size));
        kv.set("ode.n_steps", std::to_string(n_steps));
        kv.set("loss.lambda_fm", num(lambda_fm));
        kv.set("field.use_attention", use_attention ? "true" : "false");
        kv.set("field.use_dct", use_dct ? "true" : "false");
        kv.set("train.detach_trajectory", detach_trajectory ? "true" : "false");
        kv.set("data.augment", augment ? "true" : "false");
        kv.set("train.seed", std::to_string(seed));
        kv.set("model.c1", std::to_string(widths[0]));
        kv.set("model.c2", std::to_string(widths[1]));
        kv.set("model.c3", std::to_string(widths[2]));
        kv.set("model.c4", std::to_string(widths[3]));
        kv.set("field.attn_dim", std::to_string(attn_dim));
        kv.set("field.token_stride", std::to_string(token_stride));
        kv.set("loss.weight_window", std::to_string(weight_window));
        kv.set("loss.weight_gain", num(weight_gain));
        kv.set("ode.z0_noise_std", num(z0_noise_std));
        return kv;
    }
};

}  // namespace pf
