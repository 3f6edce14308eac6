/* Integer inference routine. Table driven by acdnet_schedule; all
 * activations live in one static arena. No heap, no floating point. */

#include "acdnet_model.h"

static int8_t acd_arena[ACDNET_ARENA_BYTES > 0 ? ACDNET_ARENA_BYTES : 1];

/* p / 2^shift, rounded half away from zero. */
static int64_t acd_round_shift(int64_t p, int32_t shift)
{
    int64_t half = (int64_t)1 << (shift - 1);
    return p >= 0 ? (p + half) >> shift : -((-p + half) >> shift);
}

static int8_t acd_requant(int32_t acc, const acd_layer *L, int32_t lo)
{
    int64_t v = acd_round_shift((int64_t)acc * L->mult, L->shift);
    if (v > INT32_MAX) {
        v = INT32_MAX;
    }
    if (v < INT32_MIN) {
        v = INT32_MIN;
    }
    v += L->zp_out;
    if (v < lo) {
        v = lo;
    }
    if (v > 127) {
        v = 127;
    }
    return (int8_t)v;
}

static int32_t acd_div_round(int32_t sum, int32_t k)
{
    return sum >= 0 ? (2 * sum + k) / (2 * k) : -((-2 * sum + k) / (2 * k));
}

/* One conv output value at (f, oy, ox). */
static int32_t acd_conv_at(const acd_layer *L, const int8_t *x, uint32_t f, uint32_t oy, uint32_t ox)
{
    int32_t acc = L->b[f];
    uint32_t ci, ki, kj;
    for (ci = 0; ci < L->in_c; ci++) {
        for (ki = 0; ki < L->kh; ki++) {
            int32_t iy = (int32_t)(oy * L->sh + ki) - (int32_t)L->ph;
            if (iy < 0 || iy >= (int32_t)L->in_h) {
                continue;
            }
            for (kj = 0; kj < L->kw; kj++) {
                int32_t ix = (int32_t)(ox * L->sw + kj) - (int32_t)L->pw;
                if (ix < 0 || ix >= (int32_t)L->in_w) {
                    continue;
                }
                acc += ((int32_t)x[(ci * L->in_h + (uint32_t)iy) * L->in_w + (uint32_t)ix] - L->zp_in)
                    * (int32_t)L->w[((f * L->in_c + ci) * L->kh + ki) * L->kw + kj];
            }
        }
    }
    return acc;
}

static void acd_conv(const acd_layer *L, const int8_t *x, int8_t *y)
{
    uint32_t f, oy, ox;
    int32_t lo = L->relu ? L->zp_out : -128;
    for (f = 0; f < L->out_c; f++) {
        for (oy = 0; oy < L->out_h; oy++) {
            for (ox = 0; ox < L->out_w; ox++) {
                y[(f * L->out_h + oy) * L->out_w + ox] = acd_requant(acd_conv_at(L, x, f, oy, ox), L, lo);
            }
        }
    }
}

/* Conv streamed into a max-pool: one pool window of conv columns at a time
 * in the segment buffer. */
static void acd_conv_maxpool(const acd_layer *L, const int8_t *x, int8_t *y, int8_t *seg)
{
    uint32_t px, f, oy, c, py, ki, kj;
    int32_t lo = L->relu ? L->zp_out : -128;
    for (px = 0; px < L->out_w; px++) {
        for (f = 0; f < L->mid_c; f++) {
            for (oy = 0; oy < L->mid_h; oy++) {
                for (c = 0; c < L->pkw; c++) {
                    seg[(f * L->mid_h + oy) * L->pkw + c] = acd_requant(acd_conv_at(L, x, f, oy, px * L->pkw + c), L, lo);
                }
            }
        }
        for (f = 0; f < L->out_c; f++) {
            for (py = 0; py < L->out_h; py++) {
                int8_t best = -128;
                for (ki = 0; ki < L->pkh; ki++) {
                    for (kj = 0; kj < L->pkw; kj++) {
                        int8_t v = seg[(f * L->mid_h + py * L->pkh + ki) * L->pkw + kj];
                        if (v > best) {
                            best = v;
                        }
                    }
                }
                y[(f * L->out_h + py) * L->out_w + px] = best;
            }
        }
    }
}

static void acd_pool(const acd_layer *L, const int8_t *x, int8_t *y, int avg)
{
    uint32_t c, oy, ox, ki, kj;
    for (c = 0; c < L->out_c; c++) {
        for (oy = 0; oy < L->out_h; oy++) {
            for (ox = 0; ox < L->out_w; ox++) {
                int8_t best = -128;
                int32_t sum = 0;
                for (ki = 0; ki < L->pkh; ki++) {
                    for (kj = 0; kj < L->pkw; kj++) {
                        int8_t v = x[(c * L->in_h + oy * L->pkh + ki) * L->in_w + ox * L->pkw + kj];
                        if (v > best) {
                            best = v;
                        }
                        sum += (int32_t)v - L->zp_in;
                    }
                }
                if (avg) {
                    int32_t q = acd_div_round(sum, (int32_t)(L->pkh * L->pkw)) + L->zp_in;
                    best = (int8_t)(q < -128 ? -128 : (q > 127 ? 127 : q));
                }
                y[(c * L->out_h + oy) * L->out_w + ox] = best;
            }
        }
    }
}

static void acd_swap(const acd_layer *L, const int8_t *x, int8_t *y)
{
    uint32_t h, c, w;
    for (h = 0; h < L->in_h; h++) {
        for (c = 0; c < L->in_c; c++) {
            for (w = 0; w < L->in_w; w++) {
                y[(h * L->in_c + c) * L->in_w + w] = x[(c * L->in_h + h) * L->in_w + w];
            }
        }
    }
}

static void acd_dense(const acd_layer *L, const int8_t *x, int8_t *y)
{
    uint32_t n = L->in_c * L->in_h * L->in_w;
    uint32_t u, i;
    for (u = 0; u < L->out_c; u++) {
        int32_t acc = L->b[u];
        for (i = 0; i < n; i++) {
            acc += ((int32_t)x[i] - L->zp_in) * (int32_t)L->w[u * n + i];
        }
        y[u] = acd_requant(acc, L, -128);
    }
}

void acdnet_logits(const int8_t *input, int8_t *logits)
{
    const int8_t *cur = input;
    uint32_t i, n = 0;
    for (i = 0; i < ACDNET_N_LAYERS; i++) {
        const acd_layer *L = &acdnet_schedule[i];
        int8_t *out = acd_arena + L->out_off;
        switch (L->op) {
        case ACD_CONV:
            acd_conv(L, cur, out);
            break;
        case ACD_CONV_MAXPOOL:
            acd_conv_maxpool(L, cur, out, acd_arena + L->seg_off);
            break;
        case ACD_MAXPOOL:
            acd_pool(L, cur, out, 0);
            break;
        case ACD_AVGPOOL:
            acd_pool(L, cur, out, 1);
            break;
        case ACD_SWAP:
            acd_swap(L, cur, out);
            break;
        case ACD_DENSE:
            acd_dense(L, cur, out);
            break;
        default:
            continue;
        }
        cur = out;
        n = L->out_c * L->out_h * L->out_w;
    }
    for (i = 0; i < n; i++) {
        logits[i] = cur[i];
    }
}

int acdnet_classify(const int8_t *input)
{
    int8_t logits[ACDNET_N_CLASSES];
    int best = 0, k;
    acdnet_logits(input, logits);
    for (k = 1; k < ACDNET_N_CLASSES; k++) {
        if (logits[k] > logits[best]) {
            best = k;
        }
    }
    return best;
}
