#include "covft/config.hpp"

#include "covft/error.hpp"
#include "covft/rng.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace covft {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

template <class T>
T parse_int(const std::string& key, const std::string& v) {
    T out{};
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        throw ConfigError("expected a non-negative integer, got '" + v + "'", key);
    return out;
}

std::size_t parse_size(const std::string& key, const std::string& v) { return parse_int<std::size_t>(key, v); }

std::size_t parse_positive(const std::string& key, const std::string& v) {
    const std::size_t n = parse_size(key, v);
    if (n == 0) throw ConfigError("must be positive", key);
    return n;
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size() || !std::isfinite(d)) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("expected a number, got '" + v + "'", key);
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError("expected true/false, got '" + v + "'", key);
}

std::vector<std::uint64_t> parse_seeds(const std::string& key, const std::string& v) {
    std::vector<std::uint64_t> out;
    for (const auto& s : split_list(v)) out.push_back(parse_int<std::uint64_t>(key, s));
    if (out.empty()) throw ConfigError("needs at least one seed", key);
    return out;
}

std::string fmt_double(double d) {
    std::ostringstream os;
    os.precision(17);
    os << d;
    return os.str();
}

template <class T>
std::string join(const std::vector<T>& v, auto fmt) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += fmt(v[i]);
    }
    return out;
}

std::vector<TaskKind> parse_kinds(const std::string& key, const std::string& v) {
    if (v == "all") return diversity_kinds(kTaskKinds);
    std::vector<TaskKind> out;
    for (const auto& name : split_list(v)) {
        try {
            out.push_back(parse_task_kind(name));
        } catch (const Error& e) {
            throw ConfigError(e.what(), key);
        }
    }
    if (out.empty()) throw ConfigError("needs at least one task kind", key);
    return out;
}

constexpr std::array<std::string_view, 6> kAxisNames = {"strategy", "routing", "context",
                                                        "experts",  "placement", "diversity"};

MatrixAxis parse_axis(const std::string& key, const std::string& v) {
    for (std::size_t i = 0; i < kAxisNames.size(); ++i)
        if (kAxisNames[i] == v) return static_cast<MatrixAxis>(i);
    throw ConfigError("unknown matrix axis '" + v + "'", key);
}

struct Field {
    std::function<void(ExperimentConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

#define SIZE_FIELD(key, member)                                                                              \
    {                                                                                                        \
        key, {                                                                                               \
            [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.member = parse_size(k, v); }, \
                [](const ExperimentConfig& c) { return std::to_string(c.member); }                           \
        }                                                                                                    \
    }
#define POS_FIELD(key, member)                                                                                    \
    {                                                                                                             \
        key, {                                                                                                    \
            [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.member = parse_positive(k, v); }, \
                [](const ExperimentConfig& c) { return std::to_string(c.member); }                                \
        }                                                                                                         \
    }
#define DOUBLE_FIELD(key, member)                                                                              \
    {                                                                                                          \
        key, {                                                                                                 \
            [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.member = parse_double(k, v); }, \
                [](const ExperimentConfig& c) { return fmt_double(c.member); }                                 \
        }                                                                                                      \
    }

const std::map<std::string, Field>& fields() {
    static const std::map<std::string, Field> table = {
        {"seed",
         {[](ExperimentConfig& c, const std::string& k, const std::string& v) { c.seed = parse_int<std::uint64_t>(k, v); },
          [](const ExperimentConfig& c) { return std::to_string(c.seed); }}},
        {"output.dir",
         {[](ExperimentConfig& c, const std::string&, const std::string& v) { c.out_dir = v; },
          [](const ExperimentConfig& c) { return c.out_dir; }}},
        // model
        POS_FIELD("model.image_size", model.encoder.image_size),
        POS_FIELD("model.patch_size", model.encoder.patch_size),
        POS_FIELD("model.depth", model.encoder.depth),
        POS_FIELD("model.dim", model.encoder.dim),
        POS_FIELD("model.heads", model.encoder.heads),
        POS_FIELD("model.hidden", model.encoder.hidden),
        SIZE_FIELD("model.comoe_start", model.encoder.comoe_start),
        SIZE_FIELD("model.comoe_end", model.encoder.comoe_end),
        POS_FIELD("model.experts", model.encoder.experts),
        POS_FIELD("model.cve_rank", model.encoder.cve_rank),
        SIZE_FIELD("model.feature_layer", model.encoder.feature_layer),
        DOUBLE_FIELD("model.init_std", model.encoder.init_std),
        DOUBLE_FIELD("model.router_init_std", model.encoder.router_init_std),
        {"model.comoe",
         {[](ExperimentConfig& c, const std::string& k, const std::string& v) {
              if (v != "auto") parse_bool(k, v);
              c.comoe = v == "auto" ? "auto" : (parse_bool(k, v) ? "true" : "false");
          },
          [](const ExperimentConfig& c) { return c.comoe; }}},
        {"model.routing",
         {[](ExperimentConfig& c, const std::string&, const std::string& v) {
              c.model.encoder.routing = RoutingSpec::parse(v);
          },
          [](const ExperimentConfig& c) { return c.model.encoder.routing.str(); }}},
        {"model.context",
         {[](ExperimentConfig& c, const std::string&, const std::string& v) {
              c.model.encoder.context = parse_context_kind(v);
          },
          [](const ExperimentConfig& c) { return std::string(context_kind_name(c.model.encoder.context)); }}},
        POS_FIELD("decoder.dim", model.decoder.dim),
        POS_FIELD("decoder.depth", model.decoder.depth),
        POS_FIELD("decoder.heads", model.decoder.heads),
        POS_FIELD("decoder.hidden", model.decoder.hidden),
        POS_FIELD("decoder.max_len", model.decoder.max_len),
        POS_FIELD("text.depth", model.text.depth),
        POS_FIELD("text.heads", model.text.heads),
        DOUBLE_FIELD("text.init_std", model.text.init_std),
        // data
        {"data.kinds",
         {[](ExperimentConfig& c, const std::string& k, const std::string& v) { c.data.kinds = parse_kinds(k, v); },
          [](const ExperimentConfig& c) {
              return join(c.data.kinds, [](TaskKind t) { return std::string(task_name(t)); });
          }}},
        {"data.diversity",
         {[](ExperimentConfig& c, const std::string& k, const std::string& v) {
              const std::size_t level = parse_positive(k, v);
              if (level > static_cast<std::size_t>(kTaskKinds))
                  throw ConfigError("at most " + std::to_string(kTaskKinds) + " task kinds", k);
              c.data.kinds = diversity_kinds(level);
          },
          [](const ExperimentConfig& c) { return std::to_string(c.data.kinds.size()); }}},
        POS_FIELD("data.n_train", data.n_train),
        POS_FIELD("data.n_eval", data.n_eval),
        POS_FIELD("data.n_pretrain", data.n_pretrain),
        {"data.fraction",
         {[](ExperimentConfig& c, const std::string& k, const std::string& v) {
              const double f = parse_double(k, v);
              if (!(f > 0.0 && f <= 1.0)) throw ConfigError("must lie in (0, 1]", k);
              c.data.fraction = f;
          },
          [](const ExperimentConfig& c) { return fmt_double(c.data.fraction); }}},
        // train
        {"train.strategy",
         {[](ExperimentConfig& c, const std::string&, const std::string& v) {
              const auto keep = c.train.strategy;
              c.train.strategy = Strategy::parse(v);
              c.train.strategy.lora_rank = keep.lora_rank;
              c.train.strategy.vpt_prompts = keep.vpt_prompts;
          },
          [](const ExperimentConfig& c) { return std::string(c.train.strategy.name()); }}},
        POS_FIELD("train.lora_rank", train.strategy.lora_rank),
        POS_FIELD("train.vpt_prompts", train.strategy.vpt_prompts),
        SIZE_FIELD("train.pretrain_steps", train.pretrain_steps),
        SIZE_FIELD("train.instruct_steps", train.instruct_steps),
        POS_FIELD("train.batch", train.batch),
        DOUBLE_FIELD("train.lr_pretrain", train.lr_pretrain),
        DOUBLE_FIELD("train.lr_instruct", train.lr_instruct),
        DOUBLE_FIELD("train.lr_encoder_scale", train.lr_encoder_scale),
        DOUBLE_FIELD("train.weight_decay", train.adamw.weight_decay),
        DOUBLE_FIELD("train.warmup_frac", train.warmup_frac),
        SIZE_FIELD("train.eval_every", train.eval_every),
        SIZE_FIELD("train.checkpoint_every", train.checkpoint_every),
        {"train.parallel",
         {[](ExperimentConfig& c, const std::string& k, const std::string& v) { c.train.parallel = parse_bool(k, v); },
          [](const ExperimentConfig& c) { return std::string(c.train.parallel ? "true" : "false"); }}},
        // analysis
        POS_FIELD("analysis.k", analysis.k),
        POS_FIELD("analysis.pairs", analysis.pairs),
        POS_FIELD("analysis.probe_samples", analysis.probe_samples),
        POS_FIELD("analysis.exemplars", analysis.exemplars),
        SIZE_FIELD("analysis.snapshot_every", analysis.snapshot_every),
        // bench
        {"bench.matrix",
         {[](ExperimentConfig& c, const std::string& k, const std::string& v) { c.bench.axis = parse_axis(k, v); },
          [](const ExperimentConfig& c) { return std::string(axis_name(c.bench.axis)); }}},
        {"bench.values",
         {[](ExperimentConfig& c, const std::string&, const std::string& v) { c.bench.values = split_list(v); },
          [](const ExperimentConfig& c) { return join(c.bench.values, [](const std::string& s) { return s; }); }}},
        {"bench.seeds",
         {[](ExperimentConfig& c, const std::string& k, const std::string& v) { c.bench.seeds = parse_seeds(k, v); },
          [](const ExperimentConfig& c) {
              return join(c.bench.seeds, [](std::uint64_t s) { return std::to_string(s); });
          }}},
        // conflict
        {"conflict.seeds",
         {[](ExperimentConfig& c, const std::string& k, const std::string& v) { c.conflict.seeds = parse_seeds(k, v); },
          [](const ExperimentConfig& c) {
              return join(c.conflict.seeds, [](std::uint64_t s) { return std::to_string(s); });
          }}},
        POS_FIELD("conflict.steps", conflict.steps),
        POS_FIELD("conflict.checkpoint_every", conflict.checkpoint_every),
        POS_FIELD("conflict.n_train", conflict.n_train),
    };
    return table;
}

#undef SIZE_FIELD
#undef POS_FIELD
#undef DOUBLE_FIELD

}  // namespace

std::string_view axis_name(MatrixAxis axis) { return kAxisNames.at(static_cast<std::size_t>(axis)); }

KeyValues parse_key_values(std::istream& is) {
    KeyValues kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string t = trim(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("expected 'key = value', got '" + t + "'", "line " + std::to_string(lineno));
        const std::string key = trim(std::string_view(t).substr(0, eq));
        const std::string value = trim(std::string_view(t).substr(eq + 1));
        if (key.empty()) throw ConfigError("empty key", "line " + std::to_string(lineno));
        if (!kv.emplace(key, value).second) throw ConfigError("duplicate key", key);
    }
    return kv;
}

KeyValues read_key_values(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read " + path.string(), "--config");
    return parse_key_values(in);
}

TrainConfig ExperimentConfig::default_train() {
    TrainConfig t;
    t.pretrain_steps = 200;
    t.instruct_steps = 2000;
    t.batch = 16;
    t.lr_pretrain = 1e-3;
    t.lr_instruct = 3e-3;
    t.lr_encoder_scale = 0.1;
    return t;
}

std::uint64_t ExperimentConfig::data_seed() const { return derive_seed(seed, "data"); }
std::uint64_t ExperimentConfig::init_seed() const { return derive_seed(seed, "init"); }
std::uint64_t ExperimentConfig::train_seed() const { return derive_seed(seed, "train"); }
std::uint64_t ExperimentConfig::analysis_seed() const { return derive_seed(seed, "analysis"); }

ModelConfig ExperimentConfig::resolved_model() const {
    ModelConfig mc = model;
    mc.init_seed = init_seed();
    mc.text.dim = mc.encoder.dim;
    mc.encoder.comoe = comoe == "auto" ? train.strategy.kind == StrategyKind::covft : comoe == "true";
    return configure_model(mc, train.strategy);
}

void ExperimentConfig::validate() const {
    resolved_model();
    if (data.kinds.empty()) throw ConfigError("needs at least one task kind", "data.kinds");
    if (static_cast<double>(data.n_train) * data.fraction < static_cast<double>(data.kinds.size()))
        throw ConfigError("n_train * fraction smaller than the number of task kinds", "data.fraction");
    if (train.warmup_frac < 0.0 || train.warmup_frac > 1.0)
        throw ConfigError("must lie in [0, 1]", "train.warmup_frac");
    if (train.lr_instruct <= 0.0) throw ConfigError("must be positive", "train.lr_instruct");
    if (train.lr_pretrain <= 0.0) throw ConfigError("must be positive", "train.lr_pretrain");
    if (train.lr_encoder_scale < 0.0) throw ConfigError("must be non-negative", "train.lr_encoder_scale");
    if (train.adamw.weight_decay < 0.0) throw ConfigError("must be non-negative", "train.weight_decay");
}

void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    const auto& table = fields();
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown key", key);
    it->second.set(cfg, key, value);
}

ExperimentConfig config_from_key_values(const KeyValues& kv) {
    ExperimentConfig cfg;
    cfg.data.kinds = diversity_kinds(kTaskKinds);
    // Strategy first so lora/vpt sizes set later in the file are kept.
    if (auto it = kv.find("train.strategy"); it != kv.end()) set_config_value(cfg, it->first, it->second);
    for (const auto& [k, v] : kv)
        if (k != "train.strategy") set_config_value(cfg, k, v);
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) { return config_from_key_values(read_key_values(path)); }

std::string config_to_text(const ExperimentConfig& cfg) {
    std::string out;
    for (const auto& [k, f] : fields()) {
        if (k == "data.diversity") continue;  // data.kinds carries it
        out += k + " = " + f.get(cfg) + "\n";
    }
    return out;
}

}  // namespace covft
