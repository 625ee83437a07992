#include "strokeseg/ops.hpp"

#include <algorithm>
#include <cmath>

namespace strokeseg::ad {

namespace {

struct Spatial {
    std::int64_t n, c, d, h, w;
    std::int64_t vox() const { return d * h * w; }
};

template <class T>
Spatial spatial_of(const Tensor<T>& x, const char* op)
{
    if (!x.defined() || x.rank() != 5) throw Error(std::string(op) + ": expected an N-C-D-H-W tensor");
    const auto& s = x.shape();
    return {s[0], s[1], s[2], s[3], s[4]};
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op)
{
    if (a.shape() != b.shape())
        throw Error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// ---------------------------------------------------------------------------
// GEMM kernels. Row-major, accumulate into C. Rows of C are processed in
// blocks of four so that each streamed row of B feeds four FMAs; the inner
// loop runs over contiguous memory and vectorizes.

constexpr std::int64_t kColBlock = 512;

// C (M x N) += op(A) * B, B is K x N. op(A)[i][k] = A[i * a_row + k * a_col].
template <class T>
void gemm_acc(std::int64_t M, std::int64_t N, std::int64_t K, const T* A, std::int64_t a_row, std::int64_t a_col,
              const T* B, T* C)
{
    const std::int64_t row_blocks = (M + 3) / 4;
    parallel_for(0, row_blocks, [&](std::int64_t rb0, std::int64_t rb1) {
        for (std::int64_t j0 = 0; j0 < N; j0 += kColBlock) {
            const std::int64_t jn = std::min(kColBlock, N - j0);
            for (std::int64_t rb = rb0; rb < rb1; ++rb) {
                const std::int64_t i = rb * 4;
                if (i + 4 <= M) {
                    T* __restrict c0 = C + (i + 0) * N + j0;
                    T* __restrict c1 = C + (i + 1) * N + j0;
                    T* __restrict c2 = C + (i + 2) * N + j0;
                    T* __restrict c3 = C + (i + 3) * N + j0;
                    for (std::int64_t k = 0; k < K; ++k) {
                        const T a0 = A[(i + 0) * a_row + k * a_col];
                        const T a1 = A[(i + 1) * a_row + k * a_col];
                        const T a2 = A[(i + 2) * a_row + k * a_col];
                        const T a3 = A[(i + 3) * a_row + k * a_col];
                        const T* __restrict b = B + k * N + j0;
                        for (std::int64_t j = 0; j < jn; ++j) {
                            const T bv = b[j];
                            c0[j] += a0 * bv;
                            c1[j] += a1 * bv;
                            c2[j] += a2 * bv;
                            c3[j] += a3 * bv;
                        }
                    }
                } else {
                    for (std::int64_t ii = i; ii < M; ++ii) {
                        T* __restrict c = C + ii * N + j0;
                        for (std::int64_t k = 0; k < K; ++k) {
                            const T a = A[ii * a_row + k * a_col];
                            const T* __restrict b = B + k * N + j0;
                            for (std::int64_t j = 0; j < jn; ++j) c[j] += a * b[j];
                        }
                    }
                }
            }
        }
    }, 1);
}

// Dot product with a fixed 16-lane accumulation order.
template <class T>
T dot(const T* __restrict a, const T* __restrict b, std::int64_t n)
{
    constexpr int L = 16;
    T acc[L] = {};
    std::int64_t i = 0;
    for (; i + L <= n; i += L)
        for (int l = 0; l < L; ++l) acc[l] += a[i + l] * b[i + l];
    T tail = 0;
    for (; i < n; ++i) tail += a[i] * b[i];
    for (int s = L / 2; s > 0; s /= 2)
        for (int l = 0; l < s; ++l) acc[l] += acc[l + s];
    return acc[0] + tail;
}

// C (M x N) += A (M x K) * B(N x K)^T.
template <class T>
void gemm_nt_acc(std::int64_t M, std::int64_t N, std::int64_t K, const T* A, const T* B, T* C)
{
    parallel_for(0, M, [&](std::int64_t i0, std::int64_t i1) {
        for (std::int64_t i = i0; i < i1; ++i)
            for (std::int64_t j = 0; j < N; ++j) C[i * N + j] += dot(A + i * K, B + j * K, K);
    }, 1);
}

// ---------------------------------------------------------------------------
// im2col / col2im for stride 1, zero padding p = (k - 1) / 2.

template <class T>
void im2col(const T* x, std::int64_t cin, std::int64_t D, std::int64_t H, std::int64_t W, int k, T* cols)
{
    const int p = (k - 1) / 2;
    const std::int64_t vox = D * H * W;
    std::int64_t row = 0;
    for (std::int64_t ci = 0; ci < cin; ++ci) {
        const T* xc = x + ci * vox;
        for (int kd = 0; kd < k; ++kd)
            for (int kh = 0; kh < k; ++kh)
                for (int kw = 0; kw < k; ++kw, ++row) {
                    T* dst = cols + row * vox;
                    const std::int64_t ow = kw - p;
                    const std::int64_t xlo = std::max<std::int64_t>(0, -ow);
                    const std::int64_t xhi = std::min<std::int64_t>(W, W - ow);
                    for (std::int64_t z = 0; z < D; ++z) {
                        const std::int64_t zz = z + kd - p;
                        for (std::int64_t y = 0; y < H; ++y) {
                            T* drow = dst + (z * H + y) * W;
                            const std::int64_t yy = y + kh - p;
                            if (zz < 0 || zz >= D || yy < 0 || yy >= H || xlo >= xhi) {
                                std::fill(drow, drow + W, T(0));
                                continue;
                            }
                            const T* srow = xc + (zz * H + yy) * W + ow;
                            std::fill(drow, drow + xlo, T(0));
                            std::copy(srow + xlo, srow + xhi, drow + xlo);
                            std::fill(drow + xhi, drow + W, T(0));
                        }
                    }
                }
    }
}

template <class T>
void col2im_acc(const T* cols, std::int64_t cin, std::int64_t D, std::int64_t H, std::int64_t W, int k, T* dx)
{
    const int p = (k - 1) / 2;
    const std::int64_t vox = D * H * W;
    std::int64_t row = 0;
    for (std::int64_t ci = 0; ci < cin; ++ci) {
        T* xc = dx + ci * vox;
        for (int kd = 0; kd < k; ++kd)
            for (int kh = 0; kh < k; ++kh)
                for (int kw = 0; kw < k; ++kw, ++row) {
                    const T* src = cols + row * vox;
                    const std::int64_t ow = kw - p;
                    const std::int64_t xlo = std::max<std::int64_t>(0, -ow);
                    const std::int64_t xhi = std::min<std::int64_t>(W, W - ow);
                    for (std::int64_t z = 0; z < D; ++z) {
                        const std::int64_t zz = z + kd - p;
                        if (zz < 0 || zz >= D) continue;
                        for (std::int64_t y = 0; y < H; ++y) {
                            const std::int64_t yy = y + kh - p;
                            if (yy < 0 || yy >= H) continue;
                            const T* srow = src + (z * H + y) * W;
                            T* drow = xc + (zz * H + yy) * W + ow;
                            for (std::int64_t xi = xlo; xi < xhi; ++xi) drow[xi] += srow[xi];
                        }
                    }
                }
    }
}

struct ConvGeom {
    Spatial in;
    std::int64_t cout;
    int k;
};

template <class T>
ConvGeom conv_geometry(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b)
{
    const Spatial s = spatial_of(x, "conv3d");
    if (!w.defined() || w.rank() != 5) throw Error("conv3d: weight must be (Cout, Cin, k, k, k)");
    const auto& ws = w.shape();
    const std::int64_t k = ws[2];
    if (ws[3] != k || ws[4] != k || (k != 1 && k != 3))
        throw Error("conv3d: unsupported kernel size " + shape_str(ws));
    if (ws[1] != s.c)
        throw Error("conv3d: channel mismatch, input has " + std::to_string(s.c) + " channels, weight expects " +
                    std::to_string(ws[1]));
    if (b.defined() && (b.rank() != 1 || b.dim(0) != ws[0])) throw Error("conv3d: bias must have shape (Cout)");
    return {s, ws[0], static_cast<int>(k)};
}

} // namespace

// ---------------------------------------------------------------------------

template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b)
{
    const ConvGeom g = conv_geometry(x, w, b);
    const Spatial s = g.in;
    const std::int64_t vox = s.vox();
    const std::int64_t R = s.c * g.k * g.k * g.k;
    const std::int64_t cout = g.cout;

    std::vector<T> out(static_cast<std::size_t>(s.n * cout * vox));
    std::vector<T> cols(g.k == 1 ? 0 : static_cast<std::size_t>(R * vox));
    const T* xv = x.data().data();
    const T* wv = w.data().data();
    for (std::int64_t n = 0; n < s.n; ++n) {
        T* on = out.data() + n * cout * vox;
        if (b.defined())
            for (std::int64_t co = 0; co < cout; ++co) std::fill(on + co * vox, on + (co + 1) * vox, b.data()[co]);
        const T* xn = xv + n * s.c * vox;
        const T* colsp = xn;
        if (g.k != 1) {
            im2col(xn, s.c, s.d, s.h, s.w, g.k, cols.data());
            colsp = cols.data();
        }
        gemm_acc<T>(cout, vox, R, wv, R, 1, colsp, on);
    }

    auto xn = x.node_ptr();
    auto wn = w.node_ptr();
    auto bn = b.defined() ? b.node_ptr() : nullptr;
    Shape shape{s.n, cout, s.d, s.h, s.w};
    return make_result<T>(std::move(shape), std::move(out), {x, w, b.defined() ? b : x},
                          [xn, wn, bn, g, R](Node<T>& o) {
        const Spatial s = g.in;
        const std::int64_t vox = s.vox();
        const std::int64_t cout = g.cout;
        const T* go = o.grad.data();
        if (bn && bn->requires_grad) {
            auto db = bn->grad_buffer();
            for (std::int64_t n = 0; n < s.n; ++n)
                for (std::int64_t co = 0; co < cout; ++co) {
                    const T* r = go + (n * cout + co) * vox;
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < vox; ++i) acc += r[i];
                    db[co] += static_cast<T>(acc);
                }
        }
        std::vector<T> cols(g.k == 1 ? 0 : static_cast<std::size_t>(R * vox));
        if (wn->requires_grad) {
            auto dw = wn->grad_buffer();
            for (std::int64_t n = 0; n < s.n; ++n) {
                const T* xnp = xn->value.data() + n * s.c * vox;
                const T* colsp = xnp;
                if (g.k != 1) {
                    im2col(xnp, s.c, s.d, s.h, s.w, g.k, cols.data());
                    colsp = cols.data();
                }
                gemm_nt_acc<T>(cout, R, vox, go + n * cout * vox, colsp, dw.data());
            }
        }
        if (xn->requires_grad) {
            auto dx = xn->grad_buffer();
            std::vector<T> dcols(static_cast<std::size_t>(R * vox));
            for (std::int64_t n = 0; n < s.n; ++n) {
                std::fill(dcols.begin(), dcols.end(), T(0));
                // dcols (R x vox) = W^T (R x Cout) * dout (Cout x vox)
                gemm_acc<T>(R, vox, cout, wn->value.data(), 1, R, go + n * cout * vox, dcols.data());
                T* dxn = dx.data() + n * s.c * vox;
                if (g.k == 1) {
                    for (std::int64_t i = 0; i < R * vox; ++i) dxn[i] += dcols[i];
                } else {
                    col2im_acc(dcols.data(), s.c, s.d, s.h, s.w, g.k, dxn);
                }
            }
        }
    });
}

template <class T>
Tensor<T> conv3d_reference(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b)
{
    const ConvGeom g = conv_geometry(x, w, b);
    const Spatial s = g.in;
    const int k = g.k, p = (k - 1) / 2;
    std::vector<T> out(static_cast<std::size_t>(s.n * g.cout * s.vox()), T(0));
    const auto xv = x.data();
    const auto wv = w.data();
    auto xat = [&](std::int64_t n, std::int64_t c, std::int64_t z, std::int64_t y, std::int64_t xx) -> T {
        if (z < 0 || z >= s.d || y < 0 || y >= s.h || xx < 0 || xx >= s.w) return T(0);
        return xv[(((n * s.c + c) * s.d + z) * s.h + y) * s.w + xx];
    };
    for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t co = 0; co < g.cout; ++co)
            for (std::int64_t z = 0; z < s.d; ++z)
                for (std::int64_t y = 0; y < s.h; ++y)
                    for (std::int64_t xx = 0; xx < s.w; ++xx) {
                        T acc = b.defined() ? b.data()[co] : T(0);
                        for (std::int64_t ci = 0; ci < s.c; ++ci)
                            for (int kd = 0; kd < k; ++kd)
                                for (int kh = 0; kh < k; ++kh)
                                    for (int kw = 0; kw < k; ++kw)
                                        acc += wv[(((co * s.c + ci) * k + kd) * k + kh) * k + kw] *
                                               xat(n, ci, z + kd - p, y + kh - p, xx + kw - p);
                        out[(((n * g.cout + co) * s.d + z) * s.h + y) * s.w + xx] = acc;
                    }
    return Tensor<T>::from_data({s.n, g.cout, s.d, s.h, s.w}, std::move(out));
}

// ---------------------------------------------------------------------------

namespace {

template <class T>
Spatial half_dims(const Tensor<T>& x, const char* op)
{
    const Spatial s = spatial_of(x, op);
    if (s.d % 2 || s.h % 2 || s.w % 2)
        throw Error(std::string(op) + ": spatial dims must be even, got " + shape_str(x.shape()));
    return {s.n, s.c, s.d / 2, s.h / 2, s.w / 2};
}

} // namespace

template <class T>
Tensor<T> maxpool3d(const Tensor<T>& x)
{
    const Spatial s = spatial_of(x, "maxpool3d");
    const Spatial o = half_dims(x, "maxpool3d");
    const auto xv = x.data();
    std::vector<T> out(static_cast<std::size_t>(o.n * o.c * o.vox()));
    std::vector<std::int64_t> arg(out.size());
    std::size_t idx = 0;
    for (std::int64_t nc = 0; nc < s.n * s.c; ++nc)
        for (std::int64_t z = 0; z < o.d; ++z)
            for (std::int64_t y = 0; y < o.h; ++y)
                for (std::int64_t xx = 0; xx < o.w; ++xx, ++idx) {
                    std::int64_t best = -1;
                    T bv = T(0);
                    for (int dz = 0; dz < 2; ++dz)
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx) {
                                const std::int64_t i =
                                    ((nc * s.d + 2 * z + dz) * s.h + 2 * y + dy) * s.w + 2 * xx + dx;
                                if (best < 0 || xv[i] > bv) {
                                    best = i;
                                    bv = xv[i];
                                }
                            }
                    out[idx] = bv;
                    arg[idx] = best;
                }
    auto xn = x.node_ptr();
    return make_result<T>({o.n, o.c, o.d, o.h, o.w}, std::move(out), {x}, [xn, arg = std::move(arg)](Node<T>& r) {
        auto dx = xn->grad_buffer();
        for (std::size_t i = 0; i < arg.size(); ++i) dx[arg[i]] += r.grad[i];
    });
}

template <class T>
Tensor<T> avgpool3d(const Tensor<T>& x)
{
    const Spatial s = spatial_of(x, "avgpool3d");
    const Spatial o = half_dims(x, "avgpool3d");
    const auto xv = x.data();
    std::vector<T> out(static_cast<std::size_t>(o.n * o.c * o.vox()));
    auto cell_index = [s](std::int64_t nc, std::int64_t z, std::int64_t y, std::int64_t xx, int dz, int dy, int dx) {
        return ((nc * s.d + 2 * z + dz) * s.h + 2 * y + dy) * s.w + 2 * xx + dx;
    };
    std::size_t idx = 0;
    for (std::int64_t nc = 0; nc < s.n * s.c; ++nc)
        for (std::int64_t z = 0; z < o.d; ++z)
            for (std::int64_t y = 0; y < o.h; ++y)
                for (std::int64_t xx = 0; xx < o.w; ++xx, ++idx) {
                    T acc = 0;
                    for (int dz = 0; dz < 2; ++dz)
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx) acc += xv[cell_index(nc, z, y, xx, dz, dy, dx)];
                    out[idx] = acc / T(8);
                }
    auto xn = x.node_ptr();
    return make_result<T>({o.n, o.c, o.d, o.h, o.w}, std::move(out), {x}, [xn, s, o, cell_index](Node<T>& r) {
        auto dxb = xn->grad_buffer();
        std::size_t idx = 0;
        for (std::int64_t nc = 0; nc < s.n * s.c; ++nc)
            for (std::int64_t z = 0; z < o.d; ++z)
                for (std::int64_t y = 0; y < o.h; ++y)
                    for (std::int64_t xx = 0; xx < o.w; ++xx, ++idx) {
                        const T g = r.grad[idx] / T(8);
                        for (int dz = 0; dz < 2; ++dz)
                            for (int dy = 0; dy < 2; ++dy)
                                for (int dx = 0; dx < 2; ++dx) dxb[cell_index(nc, z, y, xx, dz, dy, dx)] += g;
                    }
    });
}

// ---------------------------------------------------------------------------

namespace {

struct Tap {
    std::int64_t i0, i1;
    double w0, w1;
};

// Source taps for doubling an axis of length `len` with align_corners=false.
std::vector<Tap> upsample_taps(std::int64_t len)
{
    std::vector<Tap> taps(static_cast<std::size_t>(2 * len));
    for (std::int64_t o = 0; o < 2 * len; ++o) {
        double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(len - 1));
        const auto i0 = static_cast<std::int64_t>(std::floor(src));
        const std::int64_t i1 = std::min(i0 + 1, len - 1);
        const double lambda = src - static_cast<double>(i0);
        taps[o] = {i0, i1, 1.0 - lambda, lambda};
    }
    return taps;
}

// View as [outer][len][inner]; doubles `len`.
template <class T>
std::vector<T> upsample_axis(const std::vector<T>& in, std::int64_t outer, std::int64_t len, std::int64_t inner)
{
    const auto taps = upsample_taps(len);
    std::vector<T> out(static_cast<std::size_t>(outer * 2 * len * inner));
    for (std::int64_t a = 0; a < outer; ++a)
        for (std::int64_t o = 0; o < 2 * len; ++o) {
            const Tap& t = taps[o];
            const T w0 = static_cast<T>(t.w0), w1 = static_cast<T>(t.w1);
            const T* s0 = in.data() + (a * len + t.i0) * inner;
            const T* s1 = in.data() + (a * len + t.i1) * inner;
            T* d = out.data() + (a * 2 * len + o) * inner;
            for (std::int64_t i = 0; i < inner; ++i) d[i] = w0 * s0[i] + w1 * s1[i];
        }
    return out;
}

template <class T>
std::vector<T> upsample_axis_adjoint(const std::vector<T>& gout, std::int64_t outer, std::int64_t len,
                                     std::int64_t inner)
{
    const auto taps = upsample_taps(len);
    std::vector<T> gin(static_cast<std::size_t>(outer * len * inner), T(0));
    for (std::int64_t a = 0; a < outer; ++a)
        for (std::int64_t o = 0; o < 2 * len; ++o) {
            const Tap& t = taps[o];
            const T w0 = static_cast<T>(t.w0), w1 = static_cast<T>(t.w1);
            T* s0 = gin.data() + (a * len + t.i0) * inner;
            T* s1 = gin.data() + (a * len + t.i1) * inner;
            const T* d = gout.data() + (a * 2 * len + o) * inner;
            for (std::int64_t i = 0; i < inner; ++i) {
                s0[i] += w0 * d[i];
                s1[i] += w1 * d[i];
            }
        }
    return gin;
}

} // namespace

template <class T>
Tensor<T> trilinear_upsample(const Tensor<T>& x)
{
    const Spatial s = spatial_of(x, "trilinear_upsample");
    const std::int64_t nc = s.n * s.c;
    std::vector<T> v(x.data().begin(), x.data().end());
    v = upsample_axis(v, nc * s.d * s.h, s.w, 1);
    v = upsample_axis(v, nc * s.d, s.h, 2 * s.w);
    v = upsample_axis(v, nc, s.d, 4 * s.h * s.w);
    auto xn = x.node_ptr();
    return make_result<T>({s.n, s.c, 2 * s.d, 2 * s.h, 2 * s.w}, std::move(v), {x}, [xn, s, nc](Node<T>& r) {
        std::vector<T> g = upsample_axis_adjoint(r.grad, nc, s.d, 4 * s.h * s.w);
        g = upsample_axis_adjoint(g, nc * s.d, s.h, 2 * s.w);
        g = upsample_axis_adjoint(g, nc * s.d * s.h, s.w, 1);
        auto dx = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    });
}

// ---------------------------------------------------------------------------

template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps)
{
    const Spatial s = spatial_of(x, "instance_norm");
    const std::int64_t S = s.vox();
    if (S < 2) throw Error("instance_norm: spatial size must be at least 2");
    if (gamma.rank() != 1 || gamma.dim(0) != s.c || beta.rank() != 1 || beta.dim(0) != s.c)
        throw Error("instance_norm: gamma/beta must have shape (C)");
    const auto xv = x.data();
    const auto gv = gamma.data();
    const auto bv = beta.data();
    std::vector<T> out(xv.size());
    std::vector<T> xhat(xv.size());
    std::vector<T> inv_std(static_cast<std::size_t>(s.n * s.c));
    for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t c = 0; c < s.c; ++c) {
            const std::int64_t base = (n * s.c + c) * S;
            double mean = 0.0;
            for (std::int64_t i = 0; i < S; ++i) mean += xv[base + i];
            mean /= static_cast<double>(S);
            double var = 0.0;
            for (std::int64_t i = 0; i < S; ++i) {
                const double d = xv[base + i] - mean;
                var += d * d;
            }
            var /= static_cast<double>(S);
            const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
            inv_std[n * s.c + c] = static_cast<T>(is);
            for (std::int64_t i = 0; i < S; ++i) {
                const T h = static_cast<T>((xv[base + i] - mean) * is);
                xhat[base + i] = h;
                out[base + i] = gv[c] * h + bv[c];
            }
        }
    auto xn = x.node_ptr();
    auto gn = gamma.node_ptr();
    auto bn = beta.node_ptr();
    return make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                          [xn, gn, bn, s, S, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& r) {
        const T* g = r.grad.data();
        for (std::int64_t n = 0; n < s.n; ++n)
            for (std::int64_t c = 0; c < s.c; ++c) {
                const std::int64_t base = (n * s.c + c) * S;
                double sum_g = 0.0, sum_gh = 0.0;
                for (std::int64_t i = 0; i < S; ++i) {
                    sum_g += g[base + i];
                    sum_gh += static_cast<double>(g[base + i]) * xhat[base + i];
                }
                if (bn->requires_grad) bn->grad_buffer()[c] += static_cast<T>(sum_g);
                if (gn->requires_grad) gn->grad_buffer()[c] += static_cast<T>(sum_gh);
                if (xn->requires_grad) {
                    auto dx = xn->grad_buffer();
                    const double gam = gn->value[c];
                    const double mg = gam * sum_g / static_cast<double>(S);
                    const double mgh = gam * sum_gh / static_cast<double>(S);
                    const double is = inv_std[n * s.c + c];
                    for (std::int64_t i = 0; i < S; ++i)
                        dx[base + i] += static_cast<T>(is * (gam * g[base + i] - mg - xhat[base + i] * mgh));
                }
            }
    });
}

// ---------------------------------------------------------------------------

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, T alpha)
{
    const auto xv = x.data();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : alpha * xv[i];
    auto xn = x.node_ptr();
    return make_result<T>(x.shape(), std::move(out), {x}, [xn, alpha](Node<T>& r) {
        auto dx = xn->grad_buffer();
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += xn->value[i] > T(0) ? r.grad[i] : alpha * r.grad[i];
    });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x)
{
    const auto xv = x.data();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
    auto xn = x.node_ptr();
    return make_result<T>(x.shape(), std::move(out), {x}, [xn](Node<T>& r) {
        auto dx = xn->grad_buffer();
        for (std::size_t i = 0; i < dx.size(); ++i)
            if (xn->value[i] > T(0)) dx[i] += r.grad[i];
    });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x)
{
    const auto xv = x.data();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const T v = xv[i];
        if (v >= T(0)) {
            out[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            out[i] = e / (T(1) + e);
        }
    }
    auto xn = x.node_ptr();
    return make_result<T>(x.shape(), out, {x}, [xn, y = out](Node<T>& r) {
        auto dx = xn->grad_buffer();
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += r.grad[i] * y[i] * (T(1) - y[i]);
    });
}

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x)
{
    const Spatial s = spatial_of(x, "global_avg_pool");
    const std::int64_t S = s.vox();
    const auto xv = x.data();
    std::vector<T> out(static_cast<std::size_t>(s.n * s.c));
    for (std::int64_t i = 0; i < s.n * s.c; ++i) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < S; ++j) acc += xv[i * S + j];
        out[i] = static_cast<T>(acc / static_cast<double>(S));
    }
    auto xn = x.node_ptr();
    return make_result<T>({s.n, s.c}, std::move(out), {x}, [xn, s, S](Node<T>& r) {
        auto dx = xn->grad_buffer();
        for (std::int64_t i = 0; i < s.n * s.c; ++i) {
            const T g = r.grad[i] / static_cast<T>(S);
            for (std::int64_t j = 0; j < S; ++j) dx[i * S + j] += g;
        }
    });
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b)
{
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1))
        throw Error("linear: shape mismatch " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
    const std::int64_t N = x.dim(0), in = x.dim(1), outf = w.dim(0);
    if (b.defined() && (b.rank() != 1 || b.dim(0) != outf)) throw Error("linear: bias must have shape (out)");
    const auto xv = x.data();
    const auto wv = w.data();
    std::vector<T> out(static_cast<std::size_t>(N * outf));
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t o = 0; o < outf; ++o) {
            T acc = b.defined() ? b.data()[o] : T(0);
            for (std::int64_t i = 0; i < in; ++i) acc += wv[o * in + i] * xv[n * in + i];
            out[n * outf + o] = acc;
        }
    auto xn = x.node_ptr();
    auto wn = w.node_ptr();
    auto bn = b.defined() ? b.node_ptr() : nullptr;
    return make_result<T>({N, outf}, std::move(out), {x, w, b.defined() ? b : x}, [xn, wn, bn, N, in, outf](Node<T>& r) {
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t o = 0; o < outf; ++o) {
                const T g = r.grad[n * outf + o];
                if (bn && bn->requires_grad) bn->grad_buffer()[o] += g;
                if (wn->requires_grad) {
                    auto dw = wn->grad_buffer();
                    for (std::int64_t i = 0; i < in; ++i) dw[o * in + i] += g * xn->value[n * in + i];
                }
                if (xn->requires_grad) {
                    auto dx = xn->grad_buffer();
                    for (std::int64_t i = 0; i < in; ++i) dx[n * in + i] += g * wn->value[o * in + i];
                }
            }
    });
}

template <class T>
Tensor<T> add(const Tensor<T>& x, const Tensor<T>& y)
{
    require_same_shape(x, y, "add");
    const auto xv = x.data();
    const auto yv = y.data();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + yv[i];
    auto xn = x.node_ptr();
    auto yn = y.node_ptr();
    return make_result<T>(x.shape(), std::move(out), {x, y}, [xn, yn](Node<T>& r) {
        for (auto* in : {xn.get(), yn.get()}) {
            if (!in->requires_grad) continue;
            auto d = in->grad_buffer();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += r.grad[i];
        }
    });
}

template <class T>
Tensor<T> mul(const Tensor<T>& x, const Tensor<T>& y)
{
    require_same_shape(x, y, "mul");
    const auto xv = x.data();
    const auto yv = y.data();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * yv[i];
    auto xn = x.node_ptr();
    auto yn = y.node_ptr();
    return make_result<T>(x.shape(), std::move(out), {x, y}, [xn, yn](Node<T>& r) {
        if (xn->requires_grad) {
            auto d = xn->grad_buffer();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += r.grad[i] * yn->value[i];
        }
        if (yn->requires_grad) {
            auto d = yn->grad_buffer();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += r.grad[i] * xn->value[i];
        }
    });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor)
{
    const auto xv = x.data();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor;
    auto xn = x.node_ptr();
    return make_result<T>(x.shape(), std::move(out), {x}, [xn, factor](Node<T>& r) {
        auto d = xn->grad_buffer();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += r.grad[i] * factor;
    });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x)
{
    double acc = 0.0;
    for (T v : x.data()) acc += v;
    auto xn = x.node_ptr();
    return make_result<T>({1}, {static_cast<T>(acc)}, {x}, [xn](Node<T>& r) {
        auto d = xn->grad_buffer();
        const T g = r.grad[0];
        for (auto& v : d) v += g;
    });
}

template <class T>
Tensor<T> mul_channelwise(const Tensor<T>& x, const Tensor<T>& s)
{
    const Spatial sp = spatial_of(x, "mul_channelwise");
    if (s.rank() != 2 || s.dim(0) != sp.n || s.dim(1) != sp.c)
        throw Error("mul_channelwise: scale shape " + shape_str(s.shape()) + " does not match " + shape_str(x.shape()));
    const std::int64_t S = sp.vox();
    const auto xv = x.data();
    const auto sv = s.data();
    std::vector<T> out(xv.size());
    for (std::int64_t i = 0; i < sp.n * sp.c; ++i)
        for (std::int64_t j = 0; j < S; ++j) out[i * S + j] = xv[i * S + j] * sv[i];
    auto xn = x.node_ptr();
    auto sn = s.node_ptr();
    return make_result<T>(x.shape(), std::move(out), {x, s}, [xn, sn, sp, S](Node<T>& r) {
        for (std::int64_t i = 0; i < sp.n * sp.c; ++i) {
            if (sn->requires_grad) {
                double acc = 0.0;
                for (std::int64_t j = 0; j < S; ++j)
                    acc += static_cast<double>(r.grad[i * S + j]) * xn->value[i * S + j];
                sn->grad_buffer()[i] += static_cast<T>(acc);
            }
            if (xn->requires_grad) {
                auto dx = xn->grad_buffer();
                const T sc = sn->value[i];
                for (std::int64_t j = 0; j < S; ++j) dx[i * S + j] += r.grad[i * S + j] * sc;
            }
        }
    });
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b)
{
    const Spatial sa = spatial_of(a, "concat_channels");
    const Spatial sb = spatial_of(b, "concat_channels");
    if (sa.n != sb.n || sa.d != sb.d || sa.h != sb.h || sa.w != sb.w)
        throw Error("concat_channels: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::int64_t S = sa.vox();
    const std::int64_t ca = sa.c * S, cb = sb.c * S;
    std::vector<T> out(static_cast<std::size_t>(sa.n * (ca + cb)));
    for (std::int64_t n = 0; n < sa.n; ++n) {
        std::copy_n(a.data().begin() + n * ca, ca, out.begin() + n * (ca + cb));
        std::copy_n(b.data().begin() + n * cb, cb, out.begin() + n * (ca + cb) + ca);
    }
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    return make_result<T>({sa.n, sa.c + sb.c, sa.d, sa.h, sa.w}, std::move(out), {a, b},
                          [an, bn, N = sa.n, ca, cb](Node<T>& r) {
        for (std::int64_t n = 0; n < N; ++n) {
            const T* g = r.grad.data() + n * (ca + cb);
            if (an->requires_grad) {
                auto d = an->grad_buffer();
                for (std::int64_t i = 0; i < ca; ++i) d[n * ca + i] += g[i];
            }
            if (bn->requires_grad) {
                auto d = bn->grad_buffer();
                for (std::int64_t i = 0; i < cb; ++i) d[n * cb + i] += g[ca + i];
            }
        }
    });
}

#define STROKESEG_INSTANTIATE_OPS(T)                                                              \
    template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
    template Tensor<T> conv3d_reference(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);    \
    template Tensor<T> maxpool3d(const Tensor<T>&);                                               \
    template Tensor<T> avgpool3d(const Tensor<T>&);                                               \
    template Tensor<T> trilinear_upsample(const Tensor<T>&);                                      \
    template Tensor<T> instance_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);    \
    template Tensor<T> leaky_relu(const Tensor<T>&, T);                                           \
    template Tensor<T> relu(const Tensor<T>&);                                                    \
    template Tensor<T> sigmoid(const Tensor<T>&);                                                 \
    template Tensor<T> global_avg_pool(const Tensor<T>&);                                         \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> scale(const Tensor<T>&, T);                                                \
    template Tensor<T> sum(const Tensor<T>&);                                                     \
    template Tensor<T> mul_channelwise(const Tensor<T>&, const Tensor<T>&);                       \
    template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);

STROKESEG_INSTANTIATE_OPS(float)
STROKESEG_INSTANTIATE_OPS(double)

} // namespace strokeseg::ad
