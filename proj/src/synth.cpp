#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <thread>

#include "dstkit/corpus.hpp"
#include "dstkit/keyed_rng.hpp"

namespace dstkit {

namespace {

struct PoolSlot {
    const char* name;
    const char* description;
    const char* word;      // how users refer to the slot ("area", "price", ...)
    const char* fragment;  // mention fragment; "{v}" is replaced by the value
    std::vector<const char*> values;
};

struct PoolDomain {
    const char* name;
    const char* description;
    std::vector<PoolSlot> slots;
};

const std::vector<const char*> kAreas = {"north", "south", "east", "west", "centre"};
const std::vector<const char*> kPrices = {"cheap", "moderate", "expensive"};
const std::vector<const char*> kDays = {"monday", "tuesday", "wednesday", "thursday",
                                        "friday", "saturday", "sunday"};
const std::vector<const char*> kPeople = {"1", "2", "3", "4", "5", "6", "7", "8"};
const std::vector<const char*> kTimes = {"08:15", "09:30", "10:45", "12:00", "13:15", "14:30",
                                         "16:00", "17:45", "18:30", "19:15", "20:00", "21:30"};
const std::vector<const char*> kCities = {"cambridge", "london", "norwich", "ely",
                                          "leicester", "stevenage", "peterborough", "oxford"};

const std::vector<PoolDomain>& pool() {
    static const std::vector<PoolDomain> domains = {
        {"hotel",
         "hotel reservations and places to stay",
         {
             {"area", "area or place of the hotel", "area", "in the {v}", kAreas},
             {"pricerange", "price budget of the hotel", "price", "with a {v} price", kPrices},
             {"stars", "star rating of the hotel", "star rating", "with {v} stars",
              {"1", "2", "3", "4", "5"}},
             {"bookpeople", "number of people for the hotel booking", "group size",
              "for {v} people", kPeople},
             {"bookday", "day of the hotel booking", "day", "from {v}", kDays},
             {"name", "name of the hotel", "name", "called {v}",
              {"acorn lodge", "city inn", "river house", "the gonville", "alpha stay",
               "bridge hotel"}},
         }},
        {"restaurant",
         "find places to dine and whet your appetite",
         {
             {"area", "area or place of the restaurant", "area", "in the {v}", kAreas},
             {"pricerange", "price budget for the restaurant", "price", "with a {v} price",
              kPrices},
             {"food", "the cuisine of the restaurant", "food", "serving {v} food",
              {"italian", "chinese", "indian", "british", "french", "thai", "korean",
               "spanish"}},
             {"booktime", "time of the restaurant booking", "time", "at {v}", kTimes},
             {"bookday", "day of the restaurant booking", "day", "on {v}", kDays},
             {"bookpeople", "number of people for the restaurant booking", "group size",
              "for {v} people", kPeople},
         }},
        {"train",
         "find trains that take you to places",
         {
             {"departure", "departure location of the train", "departure", "from {v}", kCities},
             {"destination", "destination of the train", "destination", "to {v}", kCities},
             {"day", "day of the train", "day", "on {v}", kDays},
             {"leaveat", "leaving time of the train", "departure time", "leaving at {v}",
              kTimes},
             {"bookpeople", "number of train tickets", "number of tickets", "for {v} people",
              kPeople},
             {"arriveby", "arrival time of the train", "arrival time", "arriving by {v}",
              kTimes},
         }},
        {"taxi",
         "rent cheap cabs to avoid traffic",
         {
             {"departure", "departure location of the taxi", "pickup", "from {v}", kCities},
             {"destination", "destination of the taxi", "dropoff", "to {v}", kCities},
             {"leaveat", "leaving time of the taxi", "pickup time", "leaving at {v}", kTimes},
             {"arriveby", "arrival time of the taxi", "arrival time", "arriving by {v}",
              kTimes},
         }},
        {"attraction",
         "find touristy stuff to do around you",
         {
             {"area", "area to search for attractions", "area", "in the {v}", kAreas},
             {"type", "type of the attraction", "type", "that is a {v}",
              {"museum", "park", "theatre", "college", "cinema", "gallery"}},
             {"name", "name of the attraction", "name", "called {v}",
              {"kings college", "the fitzwilliam", "botanic garden", "corn exchange",
               "wandlebury"}},
             {"pricerange", "entrance fee level", "fee", "with a {v} fee", kPrices},
         }},
        {"flight",
         "search and book flights",
         {
             {"departure", "departure airport of the flight", "origin", "out of {v}",
              kCities},
             {"destination", "destination of the flight", "destination", "into {v}",
              kCities},
             {"class", "seating class of the flight", "class", "in {v} class",
              {"economy", "premium", "business", "first"}},
             {"day", "day of the flight", "day", "on {v}", kDays},
         }},
    };
    return domains;
}

const std::vector<const char*> kSystemUtterances = {
    "sure , anything else ?", "ok , noted .", "got it . what else ?",
    "i can help with that .", "alright . anything more ?", "done . can i help more ?",
};

std::string fill(const char* fragment, const std::string& value) {
    std::string s(fragment);
    const auto pos = s.find("{v}");
    if (pos != std::string::npos) {
        s.replace(pos, 3, value);
    }
    return s;
}

struct SlotRef {
    int domain;
    int slot;
    std::size_t schema_index;
};

Dialogue synth_dialogue(const SynthConfig& cfg, const Schema& schema,
                        const std::vector<SlotRef>& refs, std::uint64_t seed, int index) {
    char id_buf[32];
    std::snprintf(id_buf, sizeof(id_buf), "synth-%05d", index);
    Dialogue d;
    d.id = id_buf;

    SplitMix64 rng(keyed_seed(seed, {"synth-dialogue", d.id}));
    const auto& domains = pool();

    const int n_turns = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_turns)));
    std::vector<int> goal;
    goal.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.n_domains))));
    if (cfg.n_domains > 1 && rng.coin(0.35)) {
        int second = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.n_domains - 1)));
        if (second >= goal[0]) {
            ++second;
        }
        goal.push_back(second);
    }

    DialogueState state = DialogueState::empty(schema);
    std::size_t goal_pos = 0;
    auto slots_of = [&](int dom) {
        std::vector<SlotRef> out;
        for (const SlotRef& r : refs) {
            if (r.domain == dom) {
                out.push_back(r);
            }
        }
        return out;
    };
    auto unset_of = [&](int dom) {
        std::vector<SlotRef> out;
        for (const SlotRef& r : slots_of(dom)) {
            if (state.values[r.schema_index].is_none()) {
                out.push_back(r);
            }
        }
        return out;
    };
    auto pick_value = [&](const SlotRef& r, const std::string& avoid) {
        const auto& values = domains[r.domain].slots[r.slot].values;
        std::string v;
        do {
            v = values[rng.below(values.size())];
        } while (v == avoid && values.size() > 1);
        return v;
    };

    std::vector<int> mentioned(domains.size(), 0);
    for (int t = 0; t < n_turns; ++t) {
        Turn turn;
        if (t > 0) {
            turn.system_utterance = kSystemUtterances[rng.below(kSystemUtterances.size())];
        }
        // Move on to the next goal domain once the current one is exhausted,
        // or occasionally before that.
        if (goal_pos + 1 < goal.size() &&
            (unset_of(goal[goal_pos]).empty() || (t > 0 && rng.coin(0.3)))) {
            ++goal_pos;
        }
        const int dom = goal[goal_pos];
        const char* dom_name = domains[dom].name;
        std::vector<SlotRef> unset = unset_of(dom);

        std::vector<SlotRef> set_slots;
        for (const SlotRef& r : slots_of(dom)) {
            if (state.values[r.schema_index].kind == Value::Kind::literal) {
                set_slots.push_back(r);
            }
        }

        const double roll = rng.uniform();
        if (t > 0 && !set_slots.empty() && roll < 0.15) {
            const SlotRef& r = set_slots[rng.below(set_slots.size())];
            const std::string v =
                pick_value(r, state.values[r.schema_index].text);
            turn.user_utterance = "actually make the " + std::string(dom_name) + " " +
                                  fill(domains[dom].slots[r.slot].fragment, v) + " instead .";
            state.values[r.schema_index] = Value::literal(v);
        } else if (t > 0 && !unset.empty() && roll < 0.23) {
            const SlotRef& r = unset[rng.below(unset.size())];
            turn.user_utterance = "any " + std::string(domains[dom].slots[r.slot].word) +
                                  " is fine for the " + dom_name + " .";
            state.values[r.schema_index] = Value::dontcare();
        } else if (!unset.empty()) {
            const std::size_t n_inform = std::min<std::size_t>(unset.size(), 1 + rng.below(2));
            std::vector<std::string> parts;
            for (std::size_t k = 0; k < n_inform; ++k) {
                const std::size_t pick = rng.below(unset.size());
                const SlotRef r = unset[pick];
                unset.erase(unset.begin() + static_cast<std::ptrdiff_t>(pick));
                const std::string v = pick_value(r, "");
                parts.push_back(fill(domains[dom].slots[r.slot].fragment, v));
                state.values[r.schema_index] = Value::literal(v);
            }
            std::string body = parts[0];
            for (std::size_t k = 1; k < parts.size(); ++k) {
                body += " and " + parts[k];
            }
            if (mentioned[dom] == 0) {
                turn.user_utterance = "i need a " + std::string(dom_name) + " " + body + " .";
            } else {
                turn.user_utterance = "the " + std::string(dom_name) + " should be " + body + " .";
            }
        } else {
            turn.user_utterance = "that is all for the " + std::string(dom_name) + " , thanks .";
        }
        mentioned[dom] = 1;
        d.turns.push_back(std::move(turn));
        d.gold_states.push_back(state);
    }
    return d;
}

}  // namespace

int synth_max_domains() { return static_cast<int>(pool().size()); }

int synth_max_slots_per_domain() {
    std::size_t m = pool().front().slots.size();
    for (const PoolDomain& d : pool()) {
        m = std::min(m, d.slots.size());
    }
    return static_cast<int>(m);
}

void SynthConfig::validate() const {
    if (n_dialogues < 1 || n_domains < 1 || slots_per_domain < 1 || max_turns < 1) {
        throw std::invalid_argument("synth config counts must all be >= 1");
    }
    if (n_domains > synth_max_domains()) {
        throw std::invalid_argument("synth supports at most " +
                                    std::to_string(synth_max_domains()) + " domains");
    }
    if (slots_per_domain > synth_max_slots_per_domain()) {
        throw std::invalid_argument("synth supports at most " +
                                    std::to_string(synth_max_slots_per_domain()) +
                                    " slots per domain");
    }
    if (!(categorical_ratio >= 0.0 && categorical_ratio <= 1.0)) {
        throw std::invalid_argument("categorical_ratio must lie in [0, 1]");
    }
}

SynthCorpus synth_corpus(const SynthConfig& config, std::uint64_t seed, unsigned workers) {
    config.validate();
    const auto& domains = pool();

    const int n_slots = config.n_domains * config.slots_per_domain;
    std::vector<int> perm(static_cast<std::size_t>(n_slots));
    for (int i = 0; i < n_slots; ++i) {
        perm[static_cast<std::size_t>(i)] = i;
    }
    SplitMix64 cat_rng(keyed_seed(seed, {"synth-categorical"}));
    for (std::size_t i = perm.size(); i > 1; --i) {
        std::swap(perm[i - 1], perm[cat_rng.below(i)]);
    }
    const auto n_categorical = static_cast<int>(std::lround(config.categorical_ratio * n_slots));
    std::vector<bool> categorical(static_cast<std::size_t>(n_slots), false);
    for (int i = 0; i < n_categorical; ++i) {
        categorical[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = true;
    }

    std::vector<SlotSpec> specs;
    std::vector<SlotRef> refs;
    for (int di = 0; di < config.n_domains; ++di) {
        const PoolDomain& pd = domains[static_cast<std::size_t>(di)];
        for (int si = 0; si < config.slots_per_domain; ++si) {
            const PoolSlot& ps = pd.slots[static_cast<std::size_t>(si)];
            SlotSpec spec;
            spec.domain = pd.name;
            spec.name = ps.name;
            spec.description = ps.description;
            spec.domain_description = pd.description;
            spec.is_categorical = categorical[specs.size()];
            if (spec.is_categorical) {
                spec.possible_values.assign(ps.values.begin(), ps.values.end());
            }
            refs.push_back({di, si, specs.size()});
            specs.push_back(std::move(spec));
        }
    }

    SynthCorpus corpus{Schema(std::move(specs)), {}};
    corpus.dialogues.resize(static_cast<std::size_t>(config.n_dialogues));
    auto work = [&](int begin, int end) {
        for (int i = begin; i < end; ++i) {
            corpus.dialogues[static_cast<std::size_t>(i)] =
                synth_dialogue(config, corpus.schema, refs, seed, i);
        }
    };
    const int n_workers = std::clamp(static_cast<int>(workers), 1, config.n_dialogues);
    if (n_workers == 1) {
        work(0, config.n_dialogues);
    } else {
        std::vector<std::jthread> threads;
        const int chunk = (config.n_dialogues + n_workers - 1) / n_workers;
        for (int w = 0; w < n_workers; ++w) {
            const int b = w * chunk;
            const int e = std::min(config.n_dialogues, b + chunk);
            if (b < e) {
                threads.emplace_back(work, b, e);
            }
        }
    }
    return corpus;
}

}  // namespace dstkit
