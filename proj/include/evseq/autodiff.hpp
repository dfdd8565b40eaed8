#pragma once
// Tape autodiff over Tensor. A Graph is built per forward pass; backward walks
// the tape in reverse. Leaves are either constants or Params; Param gradients
// are accumulated back into the owning Param after backward().
//
// The op set is exactly what the three-branch encoder needs. The one fused op
// is segment_attention: multi-head self-attention restricted to segments of a
// flat token buffer, with rotary encoding over a continuous per-position time
// coordinate. Its hand-written backward is covered by the finite-difference
// suite in tests/.

#include "evseq/tensor.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <utility>

namespace evseq {

// A named, trainable tensor plus its persistent gradient accumulator.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;

    Param() = default;
    Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
        grad = Tensor(value.shape);
    }
    void zero_grad() { grad.zero(); }
};

struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

class Graph {
public:
    struct Node {
        Tensor value;
        Tensor grad;            // allocated lazily in backward
        bool needs_grad = false;
        Param* param = nullptr; // set for param leaves
        std::function<void(Graph&, Node&)> backward;
    };

    Var constant(Tensor t) {
        return push(std::move(t), false, nullptr, {});
    }

    Var param(Param& p) {
        return push(p.value, true, &p, {});
    }

    const Tensor& value(Var v) const { return nodes_[v.id].value; }
    Tensor& grad(Var v) { return ensure_grad(nodes_[v.id]); }
    bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

    // -- ops ------------------------------------------------------------

    // Gather rows of a [V,d] table by id. Backward scatter-adds.
    Var rows(Var table, std::vector<int64_t> ids) {
        const Tensor& tb = value(table);
        int64_t d = tb.cols();
        Tensor out({static_cast<int64_t>(ids.size()), d});
        for (size_t i = 0; i < ids.size(); ++i) {
            int64_t id = ids[i];
            if (id < 0 || id >= tb.rows()) throw InvariantError("rows: id out of range");
            std::copy_n(&tb.data[id * d], d, &out.data[i * d]);
        }
        return push(std::move(out), needs_grad(table), nullptr,
                    [table, ids = std::move(ids), d](Graph& g, Node& n) {
                        if (!g.needs_grad(table)) return;
                        Tensor& tg = g.grad(table);
                        for (size_t i = 0; i < ids.size(); ++i)
                            for (int64_t c = 0; c < d; ++c)
                                tg.data[ids[i] * d + c] += n.grad.data[i * d + c];
                    });
    }

    Var scale(Var a, double s) {
        Tensor out = value(a);
        for (auto& x : out.data) x *= s;
        return push(std::move(out), needs_grad(a), nullptr, [a, s](Graph& g, Node& n) {
            if (!g.needs_grad(a)) return;
            Tensor& ga = g.grad(a);
            for (int64_t i = 0; i < n.grad.numel(); ++i) ga.data[i] += s * n.grad.data[i];
        });
    }

    // x[N,a] * W[a,b], no bias
    Var matmul(Var x, Var w) {
        const Tensor& tx = value(x);
        const Tensor& tw = value(w);
        if (tx.cols() != tw.rows()) throw InvariantError("matmul: shape mismatch");
        Tensor out({tx.rows(), tw.cols()});
        evseq::matmul(tx, tw, out);
        bool ng = needs_grad(x) || needs_grad(w);
        return push(std::move(out), ng, nullptr, [x, w](Graph& g, Node& n) {
            if (g.needs_grad(x)) g.grad(x).mat().noalias() += n.grad.mat() * g.value(w).mat().transpose();
            if (g.needs_grad(w)) g.grad(w).mat().noalias() += g.value(x).mat().transpose() * n.grad.mat();
        });
    }

    Var add(Var a, Var b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        if (!ta.same_shape(tb)) throw InvariantError("add: shape mismatch");
        Tensor out = ta;
        for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += tb.data[i];
        bool ng = needs_grad(a) || needs_grad(b);
        return push(std::move(out), ng, nullptr, [a, b](Graph& g, Node& n) {
            if (g.needs_grad(a)) {
                Tensor& ga = g.grad(a);
                for (int64_t i = 0; i < n.grad.numel(); ++i) ga.data[i] += n.grad.data[i];
            }
            if (g.needs_grad(b)) {
                Tensor& gb = g.grad(b);
                for (int64_t i = 0; i < n.grad.numel(); ++i) gb.data[i] += n.grad.data[i];
            }
        });
    }

    // x[N,a] * W[a,b] + bias[1,b]
    Var linear(Var x, Var w, Var bias) {
        const Tensor& tx = value(x);
        const Tensor& tw = value(w);
        const Tensor& tb = value(bias);
        if (tx.cols() != tw.rows() || tw.cols() != tb.cols())
            throw InvariantError("linear: shape mismatch");
        Tensor out({tx.rows(), tw.cols()});
        evseq::matmul(tx, tw, out);
        for (int64_t r = 0; r < out.rows(); ++r)
            for (int64_t c = 0; c < out.cols(); ++c) out.at(r, c) += tb.data[c];
        bool ng = needs_grad(x) || needs_grad(w) || needs_grad(bias);
        return push(std::move(out), ng, nullptr, [x, w, bias](Graph& g, Node& n) {
            const Tensor& tx = g.value(x);
            const Tensor& tw = g.value(w);
            if (g.needs_grad(x)) g.grad(x).mat().noalias() += n.grad.mat() * tw.mat().transpose();
            if (g.needs_grad(w)) g.grad(w).mat().noalias() += tx.mat().transpose() * n.grad.mat();
            if (g.needs_grad(bias)) {
                Tensor& gb = g.grad(bias);
                for (int64_t r = 0; r < n.grad.rows(); ++r)
                    for (int64_t c = 0; c < n.grad.cols(); ++c) gb.data[c] += n.grad.at(r, c);
            }
        });
    }

    // x[N,d] * E[V,d]^T -> [N,V]; used for embedding-tied logits.
    Var matmul_nt(Var x, Var table) {
        const Tensor& tx = value(x);
        const Tensor& te = value(table);
        if (tx.cols() != te.cols()) throw InvariantError("matmul_nt: shape mismatch");
        Tensor out({tx.rows(), te.rows()});
        evseq::matmul_nt(tx, te, out);
        bool ng = needs_grad(x) || needs_grad(table);
        return push(std::move(out), ng, nullptr, [x, table](Graph& g, Node& n) {
            const Tensor& tx = g.value(x);
            const Tensor& te = g.value(table);
            if (g.needs_grad(x)) g.grad(x).mat().noalias() += n.grad.mat() * te.mat();
            if (g.needs_grad(table))
                g.grad(table).mat().noalias() += n.grad.mat().transpose() * tx.mat();
        });
    }

    Var layernorm(Var x, Var gamma, Var beta, double eps = 1e-5) {
        const Tensor& tx = value(x);
        int64_t d = tx.cols();
        Tensor out(tx.shape);
        auto xhat = std::make_shared<Tensor>(tx.shape);
        auto rstd = std::make_shared<std::vector<double>>(tx.rows());
        const Tensor& tgm = value(gamma);
        const Tensor& tbt = value(beta);
        for (int64_t r = 0; r < tx.rows(); ++r) {
            double mean = 0.0;
            for (int64_t c = 0; c < d; ++c) mean += tx.at(r, c);
            mean /= static_cast<double>(d);
            double var = 0.0;
            for (int64_t c = 0; c < d; ++c) {
                double v = tx.at(r, c) - mean;
                var += v * v;
            }
            var /= static_cast<double>(d);
            double rs = 1.0 / std::sqrt(var + eps);
            (*rstd)[r] = rs;
            for (int64_t c = 0; c < d; ++c) {
                double xh = (tx.at(r, c) - mean) * rs;
                xhat->at(r, c) = xh;
                out.at(r, c) = xh * tgm.data[c] + tbt.data[c];
            }
        }
        bool ng = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
        return push(std::move(out), ng, nullptr,
                    [x, gamma, beta, xhat, rstd, d](Graph& g, Node& n) {
                        const Tensor& tgm = g.value(gamma);
                        if (g.needs_grad(gamma) || g.needs_grad(beta)) {
                            for (int64_t r = 0; r < n.grad.rows(); ++r)
                                for (int64_t c = 0; c < d; ++c) {
                                    if (g.needs_grad(gamma))
                                        g.grad(gamma).data[c] += n.grad.at(r, c) * xhat->at(r, c);
                                    if (g.needs_grad(beta)) g.grad(beta).data[c] += n.grad.at(r, c);
                                }
                        }
                        if (!g.needs_grad(x)) return;
                        Tensor& gx = g.grad(x);
                        double dn = static_cast<double>(d);
                        for (int64_t r = 0; r < n.grad.rows(); ++r) {
                            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                            for (int64_t c = 0; c < d; ++c) {
                                double dxh = n.grad.at(r, c) * tgm.data[c];
                                sum_dxhat += dxh;
                                sum_dxhat_xhat += dxh * xhat->at(r, c);
                            }
                            for (int64_t c = 0; c < d; ++c) {
                                double dxh = n.grad.at(r, c) * tgm.data[c];
                                gx.at(r, c) += (*rstd)[r] *
                                               (dxh - sum_dxhat / dn - xhat->at(r, c) * sum_dxhat_xhat / dn);
                            }
                        }
                    });
    }

    // Exact GELU: x * Phi(x).
    Var gelu(Var x) {
        const Tensor& tx = value(x);
        Tensor out(tx.shape);
        for (int64_t i = 0; i < tx.numel(); ++i) {
            double v = tx.data[i];
            out.data[i] = v * 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
        }
        return push(std::move(out), needs_grad(x), nullptr, [x](Graph& g, Node& n) {
            if (!g.needs_grad(x)) return;
            const Tensor& tx = g.value(x);
            Tensor& gx = g.grad(x);
            constexpr double inv_sqrt2 = 0.7071067811865475244;
            constexpr double inv_sqrt2pi = 0.3989422804014326779;
            for (int64_t i = 0; i < tx.numel(); ++i) {
                double v = tx.data[i];
                double phi_cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                double phi_pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                gx.data[i] += n.grad.data[i] * (phi_cdf + v * phi_pdf);
            }
        });
    }

    // Inverted dropout; identity when p == 0 or rng == nullptr.
    Var dropout(Var x, double p, Rng* rng) {
        if (p <= 0.0 || rng == nullptr) return x;
        const Tensor& tx = value(x);
        auto mask = std::make_shared<std::vector<double>>(tx.numel());
        double scale = 1.0 / (1.0 - p);
        Tensor out(tx.shape);
        for (int64_t i = 0; i < tx.numel(); ++i) {
            double m = rng->bernoulli(p) ? 0.0 : scale;
            (*mask)[i] = m;
            out.data[i] = tx.data[i] * m;
        }
        return push(std::move(out), needs_grad(x), nullptr, [x, mask](Graph& g, Node& n) {
            if (!g.needs_grad(x)) return;
            Tensor& gx = g.grad(x);
            for (int64_t i = 0; i < n.grad.numel(); ++i) gx.data[i] += n.grad.data[i] * (*mask)[i];
        });
    }

    // Select rows by index; backward scatter-adds.
    Var select_rows(Var x, std::vector<int64_t> idx) {
        const Tensor& tx = value(x);
        int64_t d = tx.cols();
        Tensor out({static_cast<int64_t>(idx.size()), d});
        for (size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] < 0 || idx[i] >= tx.rows()) throw InvariantError("select_rows: out of range");
            std::copy_n(&tx.data[idx[i] * d], d, &out.data[i * d]);
        }
        return push(std::move(out), needs_grad(x), nullptr,
                    [x, idx = std::move(idx), d](Graph& g, Node& n) {
                        if (!g.needs_grad(x)) return;
                        Tensor& gx = g.grad(x);
                        for (size_t i = 0; i < idx.size(); ++i)
                            for (int64_t c = 0; c < d; ++c)
                                gx.data[idx[i] * d + c] += n.grad.data[i * d + c];
                    });
    }

    // [N,d] x 3 -> [N,3d]
    Var concat_cols(Var a, Var b, Var c) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        const Tensor& tc = value(c);
        if (ta.rows() != tb.rows() || tb.rows() != tc.rows())
            throw InvariantError("concat_cols: row mismatch");
        int64_t da = ta.cols(), db = tb.cols(), dc = tc.cols();
        Tensor out({ta.rows(), da + db + dc});
        for (int64_t r = 0; r < ta.rows(); ++r) {
            std::copy_n(&ta.data[r * da], da, &out.data[r * (da + db + dc)]);
            std::copy_n(&tb.data[r * db], db, &out.data[r * (da + db + dc) + da]);
            std::copy_n(&tc.data[r * dc], dc, &out.data[r * (da + db + dc) + da + db]);
        }
        bool ng = needs_grad(a) || needs_grad(b) || needs_grad(c);
        return push(std::move(out), ng, nullptr, [a, b, c, da, db, dc](Graph& g, Node& n) {
            int64_t dt = da + db + dc;
            for (int64_t r = 0; r < n.grad.rows(); ++r) {
                if (g.needs_grad(a))
                    for (int64_t j = 0; j < da; ++j)
                        g.grad(a).data[r * da + j] += n.grad.data[r * dt + j];
                if (g.needs_grad(b))
                    for (int64_t j = 0; j < db; ++j)
                        g.grad(b).data[r * db + j] += n.grad.data[r * dt + da + j];
                if (g.needs_grad(c))
                    for (int64_t j = 0; j < dc; ++j)
                        g.grad(c).data[r * dc + j] += n.grad.data[r * dt + da + db + j];
            }
        });
    }

    // Interleave one aggregate row per record with its event rows:
    // out = [agg_0; ev rows of record 0; agg_1; ev rows of record 1; ...]
    // rec_offsets has length R+1 over the event-row axis.
    Var stack_records(Var agg, Var ev, std::vector<int64_t> rec_offsets) {
        const Tensor& ta = value(agg);
        const Tensor& te = value(ev);
        int64_t r_count = ta.rows();
        int64_t d = ta.cols();
        if (static_cast<int64_t>(rec_offsets.size()) != r_count + 1 ||
            rec_offsets.back() != te.rows())
            throw InvariantError("stack_records: offsets inconsistent");
        Tensor out({r_count + te.rows(), d});
        int64_t row = 0;
        for (int64_t r = 0; r < r_count; ++r) {
            std::copy_n(&ta.data[r * d], d, &out.data[row * d]);
            ++row;
            for (int64_t e = rec_offsets[r]; e < rec_offsets[r + 1]; ++e, ++row)
                std::copy_n(&te.data[e * d], d, &out.data[row * d]);
        }
        bool ng = needs_grad(agg) || needs_grad(ev);
        return push(std::move(out), ng, nullptr,
                    [agg, ev, rec_offsets = std::move(rec_offsets), r_count, d](Graph& g, Node& n) {
                        int64_t row = 0;
                        for (int64_t r = 0; r < r_count; ++r) {
                            if (g.needs_grad(agg))
                                for (int64_t j = 0; j < d; ++j)
                                    g.grad(agg).data[r * d + j] += n.grad.data[row * d + j];
                            ++row;
                            for (int64_t e = rec_offsets[r]; e < rec_offsets[r + 1]; ++e, ++row)
                                if (g.needs_grad(ev))
                                    for (int64_t j = 0; j < d; ++j)
                                        g.grad(ev).data[e * d + j] += n.grad.data[row * d + j];
                        }
                    });
    }

    // Prepend one copy of a learnable [1,d] special vector to every segment.
    // offsets (length S+1) index the token axis of x; the output has S extra
    // rows and its segment s spans [offsets[s]+s, offsets[s+1]+s+1).
    Var prepend_special(Var x, Var special, std::vector<int64_t> offsets) {
        const Tensor& tx = value(x);
        const Tensor& ts = value(special);
        int64_t d = tx.cols();
        int64_t n_seg = static_cast<int64_t>(offsets.size()) - 1;
        Tensor out({tx.rows() + n_seg, d});
        int64_t row = 0;
        for (int64_t s = 0; s < n_seg; ++s) {
            std::copy_n(ts.data.data(), d, &out.data[row * d]);
            ++row;
            for (int64_t t = offsets[s]; t < offsets[s + 1]; ++t, ++row)
                std::copy_n(&tx.data[t * d], d, &out.data[row * d]);
        }
        bool ng = needs_grad(x) || needs_grad(special);
        return push(std::move(out), ng, nullptr,
                    [x, special, offsets = std::move(offsets), d](Graph& g, Node& n) {
                        int64_t n_seg = static_cast<int64_t>(offsets.size()) - 1;
                        int64_t row = 0;
                        for (int64_t s = 0; s < n_seg; ++s) {
                            if (g.needs_grad(special))
                                for (int64_t j = 0; j < d; ++j)
                                    g.grad(special).data[j] += n.grad.data[row * d + j];
                            ++row;
                            for (int64_t t = offsets[s]; t < offsets[s + 1]; ++t, ++row)
                                if (g.needs_grad(x))
                                    for (int64_t j = 0; j < d; ++j)
                                        g.grad(x).data[t * d + j] += n.grad.data[row * d + j];
                        }
                    });
    }

    // ----- segmented multi-head self-attention with rotary time encoding ----
    //
    // x:        [N, d] flat token buffer
    // offsets:  length S+1; attention is confined to [offsets[s], offsets[s+1])
    // times:    continuous position per row (empty -> no rotation)
    // qkv/out:  fused projections, w_qkv [d, 3d], w_out [d, d]
    //
    // Scores depend on times only through pairwise differences (RoPE).
    struct AttnAux {
        Tensor qkv;                       // post-rotation q,k; raw v
        std::vector<Tensor> probs;        // per (segment, head) softmax rows
        std::vector<double> drop_mask;    // empty when dropout off
        Tensor ctx;                       // pre-out-projection context
    };

    // `valid`, when provided, marks rows that may be attended to (padded
    // reference path); scores are still computed for every pair so the padded
    // baseline pays its full rectangular cost, then masked before softmax.
    Var segment_attention(Var x, Var w_qkv, Var b_qkv, Var w_out, Var b_out,
                          std::vector<int64_t> offsets, std::vector<double> times,
                          int n_heads, double rope_base, double dropout_p = 0.0,
                          Rng* rng = nullptr, const std::vector<uint8_t>* valid = nullptr) {
        const Tensor& tx = value(x);
        int64_t n = tx.rows();
        int64_t d = tx.cols();
        if (value(w_qkv).rows() != d || value(w_qkv).cols() != 3 * d)
            throw InvariantError("segment_attention: w_qkv shape");
        if (d % n_heads != 0) throw InvariantError("segment_attention: d % heads");
        if (!times.empty() && static_cast<int64_t>(times.size()) != n)
            throw InvariantError("segment_attention: times length");
        for (double t : times)
            if (!std::isfinite(t)) throw InvariantError("segment_attention: non-finite time");
        int64_t dh = d / n_heads;
        int64_t n_seg = static_cast<int64_t>(offsets.size()) - 1;
        if (offsets[0] != 0 || offsets[n_seg] != n)
            throw InvariantError("segment_attention: malformed offsets");
        for (int64_t s = 0; s < n_seg; ++s)
            if (offsets[s + 1] < offsets[s]) throw InvariantError("segment_attention: offsets not monotone");

        auto aux = std::make_shared<AttnAux>();
        aux->qkv = Tensor({n, 3 * d});
        {
            Tensor tmp({n, 3 * d});
            evseq::matmul(tx, value(w_qkv), tmp);
            const Tensor& bq = value(b_qkv);
            for (int64_t r = 0; r < n; ++r)
                for (int64_t c = 0; c < 3 * d; ++c) tmp.at(r, c) += bq.data[c];
            aux->qkv = std::move(tmp);
        }
        // rotate q and k in place
        if (!times.empty()) {
            for (int64_t r = 0; r < n; ++r)
                for (int64_t h = 0; h < n_heads; ++h) {
                    rotate_half_pairs(&aux->qkv.at(r, h * dh), dh, times[r], rope_base, false);
                    rotate_half_pairs(&aux->qkv.at(r, d + h * dh), dh, times[r], rope_base, false);
                }
        }

        bool use_drop = dropout_p > 0.0 && rng != nullptr;
        double keep_scale = use_drop ? 1.0 / (1.0 - dropout_p) : 1.0;

        aux->ctx = Tensor({n, d});
        aux->probs.reserve(static_cast<size_t>(n_seg) * n_heads);
        double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
        for (int64_t s = 0; s < n_seg; ++s) {
            int64_t lo = offsets[s], len = offsets[s + 1] - offsets[s];
            for (int h = 0; h < n_heads; ++h) {
                Tensor p({len, len});
                for (int64_t i = 0; i < len; ++i) {
                    double mx = -1e300;
                    for (int64_t j = 0; j < len; ++j) {
                        double sc = 0.0;
                        for (int64_t c = 0; c < dh; ++c)
                            sc += aux->qkv.at(lo + i, h * dh + c) * aux->qkv.at(lo + j, d + h * dh + c);
                        sc *= inv_sqrt_dh;
                        if (valid && !(*valid)[static_cast<size_t>(lo + j)]) sc = -1e300;
                        p.at(i, j) = sc;
                        mx = std::max(mx, sc);
                    }
                    double denom = 0.0;
                    for (int64_t j = 0; j < len; ++j) {
                        double e = std::exp(p.at(i, j) - mx);
                        p.at(i, j) = e;
                        denom += e;
                    }
                    for (int64_t j = 0; j < len; ++j) p.at(i, j) /= denom;
                }
                // ctx rows for this head
                for (int64_t i = 0; i < len; ++i)
                    for (int64_t j = 0; j < len; ++j) {
                        double w = p.at(i, j);
                        if (use_drop) {
                            double m = rng->bernoulli(dropout_p) ? 0.0 : keep_scale;
                            aux->drop_mask.push_back(m);
                            w *= m;
                        }
                        if (w != 0.0)
                            for (int64_t c = 0; c < dh; ++c)
                                aux->ctx.at(lo + i, h * dh + c) +=
                                    w * aux->qkv.at(lo + j, 2 * d + h * dh + c);
                    }
                aux->probs.push_back(std::move(p));
            }
        }

        Tensor out({n, d});
        evseq::matmul(aux->ctx, value(w_out), out);
        const Tensor& bo = value(b_out);
        for (int64_t r = 0; r < n; ++r)
            for (int64_t c = 0; c < d; ++c) out.at(r, c) += bo.data[c];

        bool ng = needs_grad(x) || needs_grad(w_qkv) || needs_grad(b_qkv) ||
                  needs_grad(w_out) || needs_grad(b_out);
        return push(std::move(out), ng, nullptr,
                    [x, w_qkv, b_qkv, w_out, b_out, offsets = std::move(offsets),
                     times = std::move(times), n_heads, rope_base, aux, use_drop,
                     d, dh, inv_sqrt_dh](Graph& g, Node& n_) {
            int64_t n = g.value(x).rows();
            // out projection
            Tensor d_ctx({n, d});
            d_ctx.mat().noalias() = n_.grad.mat() * g.value(w_out).mat().transpose();
            if (g.needs_grad(w_out))
                g.grad(w_out).mat().noalias() += aux->ctx.mat().transpose() * n_.grad.mat();
            if (g.needs_grad(b_out)) {
                Tensor& gb = g.grad(b_out);
                for (int64_t r = 0; r < n; ++r)
                    for (int64_t c = 0; c < d; ++c) gb.data[c] += n_.grad.at(r, c);
            }

            Tensor d_qkv({n, 3 * d});
            int64_t n_seg = static_cast<int64_t>(offsets.size()) - 1;
            size_t prob_idx = 0;
            size_t mask_idx = 0;
            for (int64_t s = 0; s < n_seg; ++s) {
                int64_t lo = offsets[s], len = offsets[s + 1] - offsets[s];
                for (int h = 0; h < n_heads; ++h) {
                    const Tensor& p = aux->probs[prob_idx++];
                    // dP (after dropout unfold), dV
                    Tensor dp({len, len});
                    for (int64_t i = 0; i < len; ++i)
                        for (int64_t j = 0; j < len; ++j) {
                            double w = p.at(i, j);
                            double m = 1.0;
                            if (use_drop) m = aux->drop_mask[mask_idx++];
                            double weff = w * m;
                            // dV_j += weff * dctx_i
                            if (weff != 0.0)
                                for (int64_t c = 0; c < dh; ++c)
                                    d_qkv.at(lo + j, 2 * d + h * dh + c) +=
                                        weff * d_ctx.at(lo + i, h * dh + c);
                            // dp_ij = m * dctx_i . v_j
                            double acc = 0.0;
                            for (int64_t c = 0; c < dh; ++c)
                                acc += d_ctx.at(lo + i, h * dh + c) *
                                       aux->qkv.at(lo + j, 2 * d + h * dh + c);
                            dp.at(i, j) = m * acc;
                        }
                    // softmax backward -> dS, then dQ,dK
                    for (int64_t i = 0; i < len; ++i) {
                        double dot = 0.0;
                        for (int64_t j = 0; j < len; ++j) dot += dp.at(i, j) * p.at(i, j);
                        for (int64_t j = 0; j < len; ++j) {
                            double ds = p.at(i, j) * (dp.at(i, j) - dot) * inv_sqrt_dh;
                            if (ds == 0.0) continue;
                            for (int64_t c = 0; c < dh; ++c) {
                                d_qkv.at(lo + i, h * dh + c) += ds * aux->qkv.at(lo + j, d + h * dh + c);
                                d_qkv.at(lo + j, d + h * dh + c) += ds * aux->qkv.at(lo + i, h * dh + c);
                            }
                        }
                    }
                }
            }
            // un-rotate gradients of q,k (transpose of the rotation)
            if (!times.empty()) {
                for (int64_t r = 0; r < n; ++r)
                    for (int h = 0; h < n_heads; ++h) {
                        rotate_half_pairs(&d_qkv.at(r, h * dh), dh, times[r], rope_base, true);
                        rotate_half_pairs(&d_qkv.at(r, d + h * dh), dh, times[r], rope_base, true);
                    }
            }
            if (g.needs_grad(w_qkv))
                g.grad(w_qkv).mat().noalias() += g.value(x).mat().transpose() * d_qkv.mat();
            if (g.needs_grad(b_qkv)) {
                Tensor& gb = g.grad(b_qkv);
                for (int64_t r = 0; r < n; ++r)
                    for (int64_t c = 0; c < 3 * d; ++c) gb.data[c] += d_qkv.at(r, c);
            }
            if (g.needs_grad(x))
                g.grad(x).mat().noalias() += d_qkv.mat() * g.value(w_qkv).mat().transpose();
        });
    }

    // Mean smoothed cross-entropy over rows of logits. labels[i] in [0,V).
    Var softmax_xent_smoothed(Var logits, std::vector<int64_t> labels, double smoothing) {
        const Tensor& tl = value(logits);
        int64_t m = tl.rows(), v = tl.cols();
        if (static_cast<int64_t>(labels.size()) != m)
            throw InvariantError("xent: labels/rows mismatch");
        if (m == 0) throw InvariantError("xent: no loss positions");
        auto probs = std::make_shared<Tensor>(tl.shape);
        double loss = 0.0;
        double eps = smoothing;
        for (int64_t r = 0; r < m; ++r) {
            double mx = -1e300;
            for (int64_t c = 0; c < v; ++c) mx = std::max(mx, tl.at(r, c));
            double denom = 0.0;
            for (int64_t c = 0; c < v; ++c) denom += std::exp(tl.at(r, c) - mx);
            double log_denom = std::log(denom) + mx;
            double row_loss = 0.0;
            for (int64_t c = 0; c < v; ++c) {
                double logp = tl.at(r, c) - log_denom;
                probs->at(r, c) = std::exp(logp);
                double q = eps / static_cast<double>(v) + (c == labels[r] ? 1.0 - eps : 0.0);
                if (q != 0.0) row_loss -= q * logp;
            }
            loss += row_loss;
        }
        loss /= static_cast<double>(m);
        Tensor out({1});
        out.data[0] = loss;
        return push(std::move(out), needs_grad(logits), nullptr,
                    [logits, labels = std::move(labels), probs, eps, m, v](Graph& g, Node& n) {
                        if (!g.needs_grad(logits)) return;
                        double scale = n.grad.data[0] / static_cast<double>(m);
                        Tensor& gl = g.grad(logits);
                        for (int64_t r = 0; r < m; ++r)
                            for (int64_t c = 0; c < v; ++c) {
                                double q = eps / static_cast<double>(v) +
                                           (c == labels[r] ? 1.0 - eps : 0.0);
                                gl.at(r, c) += scale * (probs->at(r, c) - q);
                            }
                    });
    }

    // Smoothed cross-entropy with logits tied to the embedding table:
    // logits = h * E^T, never materialized whole — processed in row blocks so
    // memory stays O(block * V) at any vocab size. Backward recomputes each
    // block's softmax from the stored log-normalizers.
    Var tied_xent_loss(Var h, Var table, std::vector<int64_t> labels, double smoothing,
                       int64_t block = 256) {
        const Tensor& th = value(h);
        const Tensor& te = value(table);
        int64_t m = th.rows(), v = te.rows(), d = th.cols();
        if (te.cols() != d) throw InvariantError("tied_xent: dim mismatch");
        if (static_cast<int64_t>(labels.size()) != m)
            throw InvariantError("tied_xent: labels/rows mismatch");
        if (m == 0) throw InvariantError("tied_xent: no loss positions");
        auto log_denom = std::make_shared<std::vector<double>>(m);
        double loss = 0.0;
        double eps = smoothing;
        Tensor block_logits;
        for (int64_t r0 = 0; r0 < m; r0 += block) {
            int64_t bm = std::min(block, m - r0);
            block_logits = Tensor({bm, v});
            ECMap hb(&th.data[r0 * d], bm, d);
            block_logits.mat().noalias() = hb * te.mat().transpose();
            for (int64_t r = 0; r < bm; ++r) {
                double mx = -1e300;
                for (int64_t c = 0; c < v; ++c) mx = std::max(mx, block_logits.at(r, c));
                double denom = 0.0;
                double sum_logits = 0.0;
                for (int64_t c = 0; c < v; ++c) {
                    denom += std::exp(block_logits.at(r, c) - mx);
                    sum_logits += block_logits.at(r, c);
                }
                double ld = std::log(denom) + mx;
                (*log_denom)[r0 + r] = ld;
                // loss row = -(1-eps)*logp_y - eps/V * sum_c logp_c
                double lp_y = block_logits.at(r, labels[r0 + r]) - ld;
                loss += -(1.0 - eps) * lp_y - eps / static_cast<double>(v) *
                                                  (sum_logits - static_cast<double>(v) * ld);
            }
        }
        loss /= static_cast<double>(m);
        Tensor out({1});
        out.data[0] = loss;
        bool ng = needs_grad(h) || needs_grad(table);
        return push(std::move(out), ng, nullptr,
                    [h, table, labels = std::move(labels), log_denom, eps, m, d, block](Graph& g, Node& n) {
                        const Tensor& th = g.value(h);
                        const Tensor& te = g.value(table);
                        int64_t v = te.rows();
                        double scale = n.grad.data[0] / static_cast<double>(m);
                        for (int64_t r0 = 0; r0 < m; r0 += block) {
                            int64_t bm = std::min(block, m - r0);
                            Tensor dl({bm, v});
                            ECMap hb(&th.data[r0 * d], bm, d);
                            dl.mat().noalias() = hb * te.mat().transpose();
                            for (int64_t r = 0; r < bm; ++r) {
                                double ld = (*log_denom)[r0 + r];
                                for (int64_t c = 0; c < v; ++c) {
                                    double p = std::exp(dl.at(r, c) - ld);
                                    double q = eps / static_cast<double>(v) +
                                               (c == labels[r0 + r] ? 1.0 - eps : 0.0);
                                    dl.at(r, c) = scale * (p - q);
                                }
                            }
                            if (g.needs_grad(h)) {
                                Tensor& gh = g.grad(h);
                                EMap ghb(&gh.data[r0 * d], bm, d);
                                ghb.noalias() += dl.mat() * te.mat();
                            }
                            if (g.needs_grad(table))
                                g.grad(table).mat().noalias() += dl.mat().transpose() * hb;
                        }
                    });
    }

    // Mean sigmoid binary cross-entropy over an [m,K] logit grid (multilabel).
    Var sigmoid_bce_loss(Var logits, std::vector<double> targets) {
        const Tensor& tl = value(logits);
        int64_t total = tl.numel();
        if (static_cast<int64_t>(targets.size()) != total)
            throw InvariantError("bce: target size mismatch");
        if (total == 0) throw InvariantError("bce: empty");
        double loss = 0.0;
        for (int64_t i = 0; i < total; ++i) {
            double z = tl.data[i];
            // log(1+exp(z)) - y*z, numerically stable
            loss += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - targets[i] * z;
        }
        loss /= static_cast<double>(total);
        Tensor out({1});
        out.data[0] = loss;
        return push(std::move(out), needs_grad(logits), nullptr,
                    [logits, targets = std::move(targets), total](Graph& g, Node& n) {
                        if (!g.needs_grad(logits)) return;
                        const Tensor& tl = g.value(logits);
                        Tensor& gl = g.grad(logits);
                        double scale = n.grad.data[0] / static_cast<double>(total);
                        for (int64_t i = 0; i < total; ++i) {
                            double sig = 1.0 / (1.0 + std::exp(-tl.data[i]));
                            gl.data[i] += scale * (sig - targets[i]);
                        }
                    });
    }

    // -- engine ----------------------------------------------------------

    void backward(Var loss) {
        Node& ln = nodes_[loss.id];
        if (ln.value.numel() != 1) throw InvariantError("backward: loss must be scalar");
        ensure_grad(ln).data[0] = 1.0;
        for (int32_t i = loss.id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (!n.needs_grad || n.grad.data.empty() || !n.backward) continue;
            n.backward(*this, n);
        }
        // accumulate into params
        for (int32_t i = 0; i <= loss.id; ++i) {
            Node& n = nodes_[i];
            if (n.param && !n.grad.data.empty())
                for (int64_t j = 0; j < n.grad.numel(); ++j) n.param->grad.data[j] += n.grad.data[j];
        }
    }

    size_t size() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;

    Tensor& ensure_grad(Node& n) {
        if (n.grad.data.empty()) n.grad = Tensor(n.value.shape);
        return n.grad;
    }

    Var push(Tensor value, bool needs_grad, Param* p, std::function<void(Graph&, Node&)> bw) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        n.param = p;
        n.backward = std::move(bw);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int32_t>(nodes_.size() - 1)};
    }

    // In-place rotation of (v[2c], v[2c+1]) pairs by angle t * base^(-2c/dim);
    // inverse=true applies the transpose (angle negated).
    static void rotate_half_pairs(double* v, int64_t dim, double t, double base, bool inverse) {
        for (int64_t c = 0; c + 1 < dim; c += 2) {
            double freq = std::pow(base, -static_cast<double>(c) / static_cast<double>(dim));
            double ang = t * freq * (inverse ? -1.0 : 1.0);
            double cs = std::cos(ang), sn = std::sin(ang);
            double a = v[c], b = v[c + 1];
            v[c] = a * cs - b * sn;
            v[c + 1] = a * sn + b * cs;
        }
    }

public:
    // Attention-score introspection for the RoPE property tests: the softmax
    // logits of one (segment, head) block, same code path as the forward.
    static Tensor attention_scores(const Tensor& x, const Tensor& w_qkv, const Tensor& b_qkv,
                                   const std::vector<double>& times, int head, int n_heads,
                                   double rope_base) {
        int64_t n = x.rows(), d = x.cols();
        int64_t dh = d / n_heads;
        Tensor qkv({n, 3 * d});
        evseq::matmul(x, w_qkv, qkv);
        for (int64_t r = 0; r < n; ++r)
            for (int64_t c = 0; c < 3 * d; ++c) qkv.at(r, c) += b_qkv.data[c];
        if (!times.empty())
            for (int64_t r = 0; r < n; ++r)
                for (int h = 0; h < n_heads; ++h) {
                    rotate_half_pairs(&qkv.at(r, h * dh), dh, times[r], rope_base, false);
                    rotate_half_pairs(&qkv.at(r, d + h * dh), dh, times[r], rope_base, false);
                }
        Tensor s({n, n});
        double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int64_t c = 0; c < dh; ++c)
                    acc += qkv.at(i, head * dh + c) * qkv.at(j, d + head * dh + c);
                s.at(i, j) = acc * inv_sqrt_dh;
            }
        return s;
    }
};

} // namespace evseq
