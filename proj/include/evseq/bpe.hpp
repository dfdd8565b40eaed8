#pragma once
// Byte-level BPE. Merges are learned by repeatedly fusing the most frequent
// adjacent pair; ties break lexicographically on the (left, right) byte
// strings so training is deterministic. Encoding applies merges in learned
// order; bytes never seen at training time map to a sentinel id.

#include "evseq/common.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

namespace evseq {

class Bpe {
public:
    static constexpr int32_t kUnknown = -1;

    struct Merge {
        std::string left, right;
    };

    // corpus entries may repeat; identical corpora yield identical merge tables
    static Bpe train(const std::vector<std::string>& corpus, int64_t target_vocab) {
        Bpe bpe;
        // distinct word -> count
        std::map<std::string, int64_t> word_counts;
        for (const auto& s : corpus)
            if (!s.empty()) ++word_counts[s];

        std::set<std::string> alphabet;
        for (const auto& [w, c] : word_counts) {
            (void)c;
            for (unsigned char b : w) alphabet.insert(std::string(1, static_cast<char>(b)));
        }
        if (target_vocab < static_cast<int64_t>(alphabet.size()))
            throw ConfigError("bpe: target vocab smaller than byte alphabet");

        for (const auto& a : alphabet) bpe.intern(a);

        // words as token-id sequences
        std::vector<std::vector<int32_t>> words;
        std::vector<int64_t> counts;
        for (const auto& [w, c] : word_counts) {
            std::vector<int32_t> toks;
            toks.reserve(w.size());
            for (unsigned char b : w) toks.push_back(bpe.id_of(std::string(1, static_cast<char>(b))));
            words.push_back(std::move(toks));
            counts.push_back(c);
        }

        auto count_pairs = [&](const std::vector<int32_t>& toks, int64_t c,
                               std::map<std::pair<int32_t, int32_t>, int64_t>& acc, int64_t sign) {
            for (size_t i = 0; i + 1 < toks.size(); ++i)
                acc[{toks[i], toks[i + 1]}] += sign * c;
        };

        std::map<std::pair<int32_t, int32_t>, int64_t> pair_counts;
        std::map<std::pair<int32_t, int32_t>, std::set<size_t>> pair_words;
        for (size_t wi = 0; wi < words.size(); ++wi) {
            count_pairs(words[wi], counts[wi], pair_counts, +1);
            for (size_t i = 0; i + 1 < words[wi].size(); ++i)
                pair_words[{words[wi][i], words[wi][i + 1]}].insert(wi);
        }

        int64_t n_merges = target_vocab - static_cast<int64_t>(alphabet.size());
        for (int64_t m = 0; m < n_merges; ++m) {
            // best pair: max count, lexicographic tie-break on byte strings
            std::pair<int32_t, int32_t> best{-1, -1};
            int64_t best_count = 0;
            for (const auto& [p, c] : pair_counts) {
                if (c <= 0) continue;
                if (c > best_count) {
                    best_count = c;
                    best = p;
                } else if (c == best_count && best.first >= 0) {
                    auto cand = std::make_pair(bpe.tokens_[p.first], bpe.tokens_[p.second]);
                    auto cur = std::make_pair(bpe.tokens_[best.first], bpe.tokens_[best.second]);
                    if (cand < cur) best = p;
                }
            }
            if (best_count == 0) break;  // nothing left to merge

            int32_t merged = bpe.intern(bpe.tokens_[best.first] + bpe.tokens_[best.second]);
            bpe.merges_.push_back({bpe.tokens_[best.first], bpe.tokens_[best.second]});
            bpe.merge_rank_[{best.first, best.second}] =
                static_cast<int32_t>(bpe.merges_.size()) - 1;
            bpe.merge_result_[{best.first, best.second}] = merged;

            auto affected = pair_words[best];  // copy: we mutate the index below
            for (size_t wi : affected) {
                auto& toks = words[wi];
                count_pairs(toks, counts[wi], pair_counts, -1);
                for (size_t i = 0; i + 1 < toks.size(); ++i)
                    pair_words[{toks[i], toks[i + 1]}].erase(wi);
                apply_merge(toks, best.first, best.second, merged);
                count_pairs(toks, counts[wi], pair_counts, +1);
                for (size_t i = 0; i + 1 < toks.size(); ++i)
                    pair_words[{toks[i], toks[i + 1]}].insert(wi);
            }
            pair_counts[best] = 0;
        }
        return bpe;
    }

    // token indexes into tokens(), or kUnknown for unseen bytes
    std::vector<int32_t> encode(const std::string& s) const {
        std::vector<int32_t> toks;
        toks.reserve(s.size());
        for (unsigned char b : s) {
            auto it = token_ids_.find(std::string(1, static_cast<char>(b)));
            toks.push_back(it == token_ids_.end() ? kUnknown : it->second);
        }
        while (true) {
            int32_t best_rank = INT32_MAX;
            std::pair<int32_t, int32_t> best{-1, -1};
            for (size_t i = 0; i + 1 < toks.size(); ++i) {
                if (toks[i] == kUnknown || toks[i + 1] == kUnknown) continue;
                auto it = merge_rank_.find({toks[i], toks[i + 1]});
                if (it != merge_rank_.end() && it->second < best_rank) {
                    best_rank = it->second;
                    best = {toks[i], toks[i + 1]};
                }
            }
            if (best.first < 0) break;
            apply_merge(toks, best.first, best.second, merge_result_.at(best));
        }
        return toks;
    }

    std::string decode(const std::vector<int32_t>& toks) const {
        std::string out;
        for (int32_t t : toks) {
            if (t == kUnknown) throw InvariantError("bpe: cannot decode unknown token");
            out += tokens_[t];
        }
        return out;
    }

    const std::vector<std::string>& tokens() const { return tokens_; }
    const std::vector<Merge>& merges() const { return merges_; }
    size_t vocab_size() const { return tokens_.size(); }

    // Rebuild from persisted state: alphabet + ordered merges.
    static Bpe from_parts(const std::vector<std::string>& alphabet,
                          const std::vector<Merge>& merges) {
        Bpe bpe;
        for (const auto& a : alphabet) bpe.intern(a);
        for (const auto& m : merges) {
            int32_t l = bpe.id_of(m.left);
            int32_t r = bpe.id_of(m.right);
            if (l < 0 || r < 0) throw IoError("bpe: merge references unknown token");
            int32_t merged = bpe.intern(m.left + m.right);
            bpe.merges_.push_back(m);
            bpe.merge_rank_[{l, r}] = static_cast<int32_t>(bpe.merges_.size()) - 1;
            bpe.merge_result_[{l, r}] = merged;
        }
        return bpe;
    }

    std::vector<std::string> alphabet() const {
        std::vector<std::string> a;
        for (const auto& t : tokens_)
            if (t.size() == 1) a.push_back(t);
        return a;
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int32_t> token_ids_;
    std::vector<Merge> merges_;
    std::map<std::pair<int32_t, int32_t>, int32_t> merge_rank_;
    std::map<std::pair<int32_t, int32_t>, int32_t> merge_result_;

    int32_t intern(const std::string& t) {
        auto it = token_ids_.find(t);
        if (it != token_ids_.end()) return it->second;
        tokens_.push_back(t);
        token_ids_[t] = static_cast<int32_t>(tokens_.size()) - 1;
        return static_cast<int32_t>(tokens_.size()) - 1;
    }

    int32_t id_of(const std::string& t) const {
        auto it = token_ids_.find(t);
        return it == token_ids_.end() ? -1 : it->second;
    }

    static void apply_merge(std::vector<int32_t>& toks, int32_t l, int32_t r, int32_t merged) {
        size_t w = 0;
        for (size_t i = 0; i < toks.size();) {
            if (i + 1 < toks.size() && toks[i] == l && toks[i + 1] == r) {
                toks[w++] = merged;
                i += 2;
            } else {
                toks[w++] = toks[i++];
            }
        }
        toks.resize(w);
    }
};

} // namespace evseq
