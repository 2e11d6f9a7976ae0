#include "loraseg/runconfig.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace loraseg {

namespace {

std::string trim(const std::string& s) {
    const size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

int to_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int x = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw std::invalid_argument("config key '" + key +
                                    "': expected an integer, got '" + v + "'");
    }
}

uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const uint64_t x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw std::invalid_argument("config key '" + key +
                                    "': expected an unsigned integer, got '" +
                                    v + "'");
    }
}

float to_float(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const float x = std::stof(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw std::invalid_argument("config key '" + key +
                                    "': expected a number, got '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("config key '" + key +
                                "': expected true/false, got '" + v + "'");
}

std::array<int, 3> to_int3(const std::string& key, const std::string& v) {
    std::vector<std::string> items;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) items.push_back(trim(item));
    if (items.size() != 3)
        throw std::invalid_argument("config key '" + key +
                                    "': expected three comma-separated "
                                    "integers, got '" + v + "'");
    return {to_int(key, items[0]), to_int(key, items[1]), to_int(key, items[2])};
}

}  // namespace

RunConfig RunConfig::parse_text(const std::string& text) {
    RunConfig cfg;
    bool custom_vit_keys = false;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        " is not 'key = value': '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));

        if (key == "backbone") {
            cfg.backbone = val;
            if (val != "custom") cfg.vit = ViTConfig::preset(val);
        } else if (key == "vit.image_size") {
            cfg.vit.image_size = to_int(key, val);
        } else if (key == "vit.patch") {
            cfg.vit.patch = to_int(key, val);
            custom_vit_keys = true;
        } else if (key == "vit.layers") {
            cfg.vit.layers = to_int(key, val);
            custom_vit_keys = true;
        } else if (key == "vit.hidden") {
            cfg.vit.hidden = to_int(key, val);
            custom_vit_keys = true;
        } else if (key == "vit.mlp") {
            cfg.vit.mlp_dim = to_int(key, val);
            custom_vit_keys = true;
        } else if (key == "vit.heads") {
            cfg.vit.heads = to_int(key, val);
            custom_vit_keys = true;
        } else if (key == "vit.attention_scale") {
            if (val == "per_head")
                cfg.vit.attention_scale = AttentionScale::kPerHead;
            else if (val == "global_D")
                cfg.vit.attention_scale = AttentionScale::kGlobalD;
            else
                throw std::invalid_argument(
                    "config key 'vit.attention_scale': expected per_head or "
                    "global_D, got '" + val + "'");
        } else if (key == "lora.enabled") {
            cfg.lora_enabled = to_bool(key, val);
        } else if (key == "lora.r") {
            cfg.lora.rank = to_int(key, val);
        } else if (key == "lora.targets") {
            cfg.lora.target_query = val.find("query") != std::string::npos;
            cfg.lora.target_value = val.find("value") != std::string::npos;
            if (!cfg.lora.target_query && !cfg.lora.target_value)
                throw std::invalid_argument(
                    "config key 'lora.targets': expected a subset of "
                    "query,value, got '" + val + "'");
        } else if (key == "lora.init_std") {
            cfg.lora.init_std = to_float(key, val);
        } else if (key == "head.width") {
            cfg.head_width = to_int(key, val);
        } else if (key == "head.rates") {
            cfg.head_rates = to_int3(key, val);
        } else if (key == "data.dir") {
            cfg.data_dir = val;
        } else if (key == "data.bands") {
            cfg.bands = to_int3(key, val);
        } else if (key == "train.epochs") {
            cfg.train.epochs = to_int(key, val);
        } else if (key == "train.batch_size") {
            cfg.train.batch_size = to_int(key, val);
        } else if (key == "train.lr0") {
            cfg.train.lr0 = to_float(key, val);
        } else if (key == "train.decay_factor") {
            cfg.train.decay_factor = to_float(key, val);
        } else if (key == "train.decay_every") {
            cfg.train.decay_every = to_int(key, val);
        } else if (key == "train.decay_unit") {
            if (val == "epochs")
                cfg.train.decay_unit = DecayUnit::kEpochs;
            else if (val == "steps")
                cfg.train.decay_unit = DecayUnit::kSteps;
            else
                throw std::invalid_argument(
                    "config key 'train.decay_unit': expected epochs or steps, "
                    "got '" + val + "'");
        } else if (key == "train.threshold") {
            cfg.train.threshold = to_float(key, val);
        } else if (key == "seed") {
            cfg.seed = to_u64(key, val);
        } else if (key == "out") {
            cfg.out_dir = val;
        } else {
            throw std::invalid_argument("unknown config key '" + key + "'");
        }
    }
    if (custom_vit_keys && cfg.backbone != "custom")
        throw std::invalid_argument(
            "vit.patch/layers/hidden/mlp/heads require backbone = custom");
    cfg.train.seed = cfg.seed;
    cfg.vit.validate();
    return cfg;
}

RunConfig RunConfig::parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::invalid_argument("cannot open config file '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(f)),
                     std::istreambuf_iterator<char>());
    return parse_text(text);
}

std::string RunConfig::resolved_text() const {
    std::ostringstream os;
    os << "backbone = " << backbone << "\n";
    os << "vit.image_size = " << vit.image_size << "\n";
    if (backbone == "custom") {
        os << "vit.patch = " << vit.patch << "\n";
        os << "vit.layers = " << vit.layers << "\n";
        os << "vit.hidden = " << vit.hidden << "\n";
        os << "vit.mlp = " << vit.mlp_dim << "\n";
        os << "vit.heads = " << vit.heads << "\n";
    }
    os << "vit.attention_scale = "
       << (vit.attention_scale == AttentionScale::kPerHead ? "per_head"
                                                           : "global_D")
       << "\n";
    os << "lora.enabled = " << (lora_enabled ? "true" : "false") << "\n";
    os << "lora.r = " << lora.rank << "\n";
    os << "lora.targets = "
       << (lora.target_query && lora.target_value
               ? "query,value"
               : (lora.target_query ? "query" : "value"))
       << "\n";
    os << "lora.init_std = " << lora.init_std << "\n";
    os << "head.width = " << head_width << "\n";
    os << "head.rates = " << head_rates[0] << "," << head_rates[1] << ","
       << head_rates[2] << "\n";
    os << "data.dir = " << data_dir << "\n";
    os << "data.bands = " << bands[0] << "," << bands[1] << "," << bands[2]
       << "\n";
    os << "train.epochs = " << train.epochs << "\n";
    os << "train.batch_size = " << train.batch_size << "\n";
    os << "train.lr0 = " << train.lr0 << "\n";
    os << "train.decay_factor = " << train.decay_factor << "\n";
    os << "train.decay_every = " << train.decay_every << "\n";
    os << "train.decay_unit = "
       << (train.decay_unit == DecayUnit::kEpochs ? "epochs" : "steps") << "\n";
    os << "train.threshold = " << train.threshold << "\n";
    os << "seed = " << seed << "\n";
    os << "out = " << out_dir << "\n";
    return os.str();
}

HeadConfig RunConfig::head_config() const {
    HeadConfig h;
    h.in_dim = vit.hidden;
    h.width = head_width;
    h.atrous_rates = head_rates;
    h.out_h = vit.image_size;
    h.out_w = vit.image_size;
    return h;
}

}  // namespace loraseg
