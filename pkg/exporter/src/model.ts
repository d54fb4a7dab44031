/** A small self-contained multi-view transformer used as the bridge's
 *  reference model. It mirrors the structure the exporter must handle:
 *  per-frame camera tokens alongside image patch tokens, alternating
 *  frame-wise and global attention blocks, multi-head projections, and
 *  depth/camera prediction heads. Weights are drawn from seeded streams,
 *  so every forward pass is bit-reproducible.
 *
 *  Q/K are captured at every global-attention block before softmax,
 *  image tokens only, heads flattened into the channel axis. Key
 *  suppression adds a -inf logit bias on the suppressed image-token key
 *  columns of the mapped global blocks; camera tokens are never
 *  suppressed.
 */

import { gaussian, stream } from './rng.js';

export class ValidationError extends Error {}
export class SchemaError extends Error {}

export interface ModelConfig {
    patchSize: number;
    channels: number; // flattened across heads
    heads: number;
    logicalLayers: number; // one frame-wise + one global block each
    seed: number;
}

export const DEFAULT_CONFIG: ModelConfig = {
    patchSize: 14,
    channels: 16,
    heads: 2,
    logicalLayers: 24,
    seed: 2024,
};

export interface Frames {
    frameCount: number;
    height: number;
    width: number;
    pixels: Uint8Array; // F x H x W x 3, row-major
}

export interface Suppression {
    /** logical layer ids (1-based) the mask applies to */
    layers: number[];
    /** [layers.length][F][np] true = suppress that image token's key */
    mask: boolean[][][];
}

export interface CameraEstimate {
    fx: number;
    fy: number;
    cx: number;
    cy: number;
    rotation: number[][]; // world-to-camera
    translation: number[]; // world-to-camera
}

export interface BlockProbe {
    logicalLayer: number;
    physicalBlock: number;
    maxSuppressedMass: number;
}

export interface ForwardResult {
    q: Map<number, Float32Array>; // logical layer -> F x np x c
    k: Map<number, Float32Array>;
    features: Float32Array; // F x np x c
    depths: Float32Array; // F x H x W
    cameras: CameraEstimate[];
    probes: BlockProbe[];
    tokensPerFrame: number; // camera token + image tokens
    imageTokenOffset: number;
}

interface BlockWeights {
    wq: Float64Array;
    wk: Float64Array;
    wv: Float64Array;
    wo: Float64Array;
}

function drawMatrix(seed: number, tag: string, rows: number, cols: number, scale: number): Float64Array {
    const g = gaussian(stream(seed, tag));
    const out = new Float64Array(rows * cols);
    for (let i = 0; i < out.length; i++) out[i] = g() * scale;
    return out;
}

export class ReferenceModel {
    readonly id = 'ref-mvt-tiny';
    readonly config: ModelConfig;
    private embed: Float64Array; // 6 -> c (RGB + 2 grid coords + camera-token flag)
    private blocks: BlockWeights[]; // 2 per logical layer: frame-wise then global
    private depthHead: Float64Array; // c + 1
    private camHead: Float64Array; // c x 12

    constructor(config: ModelConfig = DEFAULT_CONFIG) {
        this.config = config;
        const c = config.channels;
        const scale = 0.35 / Math.sqrt(c);
        this.embed = drawMatrix(config.seed, 'embed', 6, c, 1.0);
        this.blocks = [];
        for (let b = 0; b < 2 * config.logicalLayers; b++) {
            this.blocks.push({
                wq: drawMatrix(config.seed, `wq${b}`, c, c, scale),
                wk: drawMatrix(config.seed, `wk${b}`, c, c, scale),
                wv: drawMatrix(config.seed, `wv${b}`, c, c, scale),
                wo: drawMatrix(config.seed, `wo${b}`, c, c, scale),
            });
        }
        this.depthHead = drawMatrix(config.seed, 'depth-head', c + 1, 1, 0.4);
        this.camHead = drawMatrix(config.seed, 'cam-head', c, 12, 0.3);
    }

    get revision(): string {
        return `seed-${this.config.seed}`;
    }

    /** logical layer id (1-based) -> physical block index */
    layerMap(): Map<number, number> {
        const map = new Map<number, number>();
        for (let l = 1; l <= this.config.logicalLayers; l++) map.set(l, 2 * (l - 1) + 1);
        return map;
    }

    forward(frames: Frames, suppression?: Suppression): ForwardResult {
        const { patchSize: P, channels: c, heads, logicalLayers } = this.config;
        const F = frames.frameCount;
        const H = frames.height;
        const W = frames.width;
        if (F < 2) throw new ValidationError(`the model needs F >= 2 frames, got ${F}`);
        if (H % P !== 0 || W % P !== 0) {
            throw new SchemaError(`frame size ${H}x${W} is not a multiple of patch size ${P}`);
        }
        const gh = H / P;
        const gw = W / P;
        const np = gh * gw;
        const perFrame = np + 1; // leading camera token
        const total = F * perFrame;

        const supByLayer = this.checkSuppression(suppression, F, np);

        // patch embedding: mean patch color + grid position (+ camera flag)
        let x: Float64Array = new Float64Array(total * c);
        for (let f = 0; f < F; f++) {
            for (let t = 0; t < perFrame; t++) {
                const row = (f * perFrame + t) * c;
                const inp = new Float64Array(6);
                if (t === 0) {
                    inp[5] = 1.0; // camera token
                    inp[0] = f / Math.max(F - 1, 1);
                } else {
                    const p = t - 1;
                    const gy = Math.floor(p / gw);
                    const gx = p % gw;
                    let r = 0;
                    let g = 0;
                    let b = 0;
                    for (let dy = 0; dy < P; dy++) {
                        for (let dx = 0; dx < P; dx++) {
                            const px = ((f * H + gy * P + dy) * W + gx * P + dx) * 3;
                            r += frames.pixels[px];
                            g += frames.pixels[px + 1];
                            b += frames.pixels[px + 2];
                        }
                    }
                    const n = P * P * 255;
                    inp[0] = r / n;
                    inp[1] = g / n;
                    inp[2] = b / n;
                    inp[3] = (gx / Math.max(gw - 1, 1)) * 2 - 1;
                    inp[4] = (gy / Math.max(gh - 1, 1)) * 2 - 1;
                }
                for (let j = 0; j < c; j++) {
                    let acc = 0;
                    for (let i = 0; i < 6; i++) acc += inp[i] * this.embed[i * c + j];
                    x[row + j] = acc;
                }
            }
        }

        const qCap = new Map<number, Float32Array>();
        const kCap = new Map<number, Float32Array>();
        const probes: BlockProbe[] = [];

        for (let l = 1; l <= logicalLayers; l++) {
            // frame-wise block: attention restricted to each frame's tokens
            x = this.attentionBlock(x, this.blocks[2 * (l - 1)], {
                F, perFrame, frameWise: true, heads, c,
            }).x;

            // global block: all tokens attend everywhere; capture + suppress here
            const sup = supByLayer.get(l);
            const res = this.attentionBlock(x, this.blocks[2 * (l - 1) + 1], {
                F, perFrame, frameWise: false, heads, c,
                suppressed: sup, capture: true,
            });
            x = res.x;
            qCap.set(l, extractImageTokens(res.q!, F, perFrame, c));
            kCap.set(l, extractImageTokens(res.k!, F, perFrame, c));
            if (sup) {
                probes.push({
                    logicalLayer: l,
                    physicalBlock: 2 * (l - 1) + 1,
                    maxSuppressedMass: res.maxSuppressedMass,
                });
            }
        }

        const features = extractImageTokens(x, F, perFrame, c);
        const depths = this.predictDepths(x, F, perFrame, gh, gw, P);
        const cameras = this.predictCameras(x, F, perFrame, H, W);
        return {
            q: qCap, k: kCap, features, depths, cameras, probes,
            tokensPerFrame: perFrame, imageTokenOffset: 1,
        };
    }

    private checkSuppression(
        suppression: Suppression | undefined, F: number, np: number
    ): Map<number, boolean[][]> {
        const out = new Map<number, boolean[][]>();
        if (!suppression) return out;
        const map = this.layerMap();
        suppression.layers.forEach((l, i) => {
            if (!map.has(l)) {
                throw new SchemaError(`suppression names logical layer ${l} outside the layer map`);
            }
            const plane = suppression.mask[i];
            if (plane.length !== F || plane.some((row) => row.length !== np)) {
                throw new SchemaError(
                    `suppression plane for layer ${l} must be ${F} x ${np} tokens`
                );
            }
            out.set(l, plane);
        });
        return out;
    }

    private attentionBlock(
        x: Float64Array,
        w: BlockWeights,
        opts: {
            F: number; perFrame: number; frameWise: boolean; heads: number; c: number;
            suppressed?: boolean[][]; capture?: boolean;
        }
    ): { x: Float64Array; q?: Float64Array; k?: Float64Array; maxSuppressedMass: number } {
        const { F, perFrame, frameWise, heads, c } = opts;
        const total = F * perFrame;
        const hd = c / heads;
        const normed = rmsNormRows(x, total, c);
        const q = matmul(normed, w.wq, total, c, c);
        const k = matmul(normed, w.wk, total, c, c);
        const v = matmul(normed, w.wv, total, c, c);

        const attnOut = new Float64Array(total * c);
        let maxSuppressedMass = 0;

        const spans: Array<[number, number]> = frameWise
            ? Array.from({ length: F }, (_, f) => [f * perFrame, (f + 1) * perFrame])
            : [[0, total]];
        for (const [lo, hi] of spans) {
            const n = hi - lo;
            const supCols: boolean[] = new Array(n).fill(false);
            let anySup = false;
            if (!frameWise && opts.suppressed) {
                for (let f = 0; f < F; f++) {
                    const row = opts.suppressed[f];
                    for (let p = 0; p < row.length; p++) {
                        if (row[p]) {
                            supCols[f * perFrame + 1 + p] = true;
                            anySup = true;
                        }
                    }
                }
            }
            for (let h = 0; h < heads; h++) {
                const off = h * hd;
                for (let i = 0; i < n; i++) {
                    const qRow = (lo + i) * c + off;
                    const logits = new Float64Array(n);
                    for (let j = 0; j < n; j++) {
                        const kRow = (lo + j) * c + off;
                        let dot = 0;
                        for (let d = 0; d < hd; d++) dot += q[qRow + d] * k[kRow + d];
                        logits[j] = dot / Math.sqrt(hd);
                    }
                    if (anySup) {
                        for (let j = 0; j < n; j++) if (supCols[j]) logits[j] = -Infinity;
                    }
                    let maxLogit = -Infinity;
                    for (let j = 0; j < n; j++) if (logits[j] > maxLogit) maxLogit = logits[j];
                    let denom = 0;
                    for (let j = 0; j < n; j++) {
                        logits[j] = Math.exp(logits[j] - maxLogit);
                        denom += logits[j];
                    }
                    let supMass = 0;
                    for (let j = 0; j < n; j++) {
                        const weight = logits[j] / denom;
                        if (anySup && supCols[j]) supMass += weight;
                        const vRow = (lo + j) * c + off;
                        const outRow = (lo + i) * c + off;
                        for (let d = 0; d < hd; d++) attnOut[outRow + d] += weight * v[vRow + d];
                    }
                    if (supMass > maxSuppressedMass) maxSuppressedMass = supMass;
                }
            }
        }

        const projected = matmul(attnOut, w.wo, total, c, c);
        const next = new Float64Array(total * c);
        for (let i = 0; i < next.length; i++) next[i] = x[i] + projected[i];
        return opts.capture
            ? { x: next, q, k, maxSuppressedMass }
            : { x: next, maxSuppressedMass };
    }

    private predictDepths(
        x: Float64Array, F: number, perFrame: number, gh: number, gw: number, P: number
    ): Float32Array {
        const c = this.config.channels;
        const H = gh * P;
        const W = gw * P;
        const out = new Float32Array(F * H * W);
        for (let f = 0; f < F; f++) {
            for (let p = 0; p < gh * gw; p++) {
                const row = (f * perFrame + 1 + p) * c;
                let acc = this.depthHead[c];
                for (let j = 0; j < c; j++) acc += x[row + j] * this.depthHead[j];
                const depth = softplus(acc) + 0.5;
                const gy = Math.floor(p / gw);
                const gx = p % gw;
                for (let dy = 0; dy < P; dy++) {
                    for (let dx = 0; dx < P; dx++) {
                        out[(f * H + gy * P + dy) * W + gx * P + dx] = depth;
                    }
                }
            }
        }
        return out;
    }

    private predictCameras(
        x: Float64Array, F: number, perFrame: number, H: number, W: number
    ): CameraEstimate[] {
        const c = this.config.channels;
        const cams: CameraEstimate[] = [];
        for (let f = 0; f < F; f++) {
            const row = f * perFrame * c; // the frame's camera token
            const h = new Float64Array(12);
            for (let j = 0; j < 12; j++) {
                let acc = 0;
                for (let i = 0; i < c; i++) acc += x[row + i] * this.camHead[i * 12 + j];
                h[j] = acc;
            }
            const fwd = normalize([h[0], h[1], h[2] + 2.0]); // bias toward +z
            let up = [h[3], h[4] + 1.0, h[5]];
            let xAxis = normalize(cross(up, fwd));
            const yAxis = cross(fwd, xAxis);
            const R = [xAxis, yAxis, fwd];
            const pos = [h[6] * 0.5 + f * 0.1, h[7] * 0.5, h[8] * 0.5];
            const t = [-dot(R[0], pos), -dot(R[1], pos), -dot(R[2], pos)];
            const fx = softplus(h[9]) + 0.8 * W;
            cams.push({
                fx,
                fy: fx,
                cx: (W - 1) / 2 + Math.tanh(h[10]) * 2,
                cy: (H - 1) / 2 + Math.tanh(h[11]) * 2,
                rotation: R,
                translation: t,
            });
        }
        return cams;
    }
}

function matmul(a: Float64Array, b: Float64Array, n: number, k: number, m: number): Float64Array {
    const out = new Float64Array(n * m);
    for (let i = 0; i < n; i++) {
        for (let kk = 0; kk < k; kk++) {
            const av = a[i * k + kk];
            if (av === 0) continue;
            for (let j = 0; j < m; j++) out[i * m + j] += av * b[kk * m + j];
        }
    }
    return out;
}

function rmsNormRows(x: Float64Array, rows: number, c: number): Float64Array {
    const out = new Float64Array(rows * c);
    for (let i = 0; i < rows; i++) {
        let sq = 0;
        for (let j = 0; j < c; j++) sq += x[i * c + j] ** 2;
        const inv = 1.0 / Math.sqrt(sq / c + 1e-8);
        for (let j = 0; j < c; j++) out[i * c + j] = x[i * c + j] * inv;
    }
    return out;
}

function extractImageTokens(
    x: Float64Array, F: number, perFrame: number, c: number
): Float32Array {
    const np = perFrame - 1;
    const out = new Float32Array(F * np * c);
    for (let f = 0; f < F; f++) {
        for (let p = 0; p < np; p++) {
            const src = (f * perFrame + 1 + p) * c;
            const dst = (f * np + p) * c;
            for (let j = 0; j < c; j++) out[dst + j] = x[src + j];
        }
    }
    return out;
}

function softplus(v: number): number {
    return v > 30 ? v : Math.log1p(Math.exp(v));
}

function normalize(v: number[]): number[] {
    const n = Math.hypot(v[0], v[1], v[2]);
    return [v[0] / n, v[1] / n, v[2] / n];
}

function cross(a: number[], b: number[]): number[] {
    return [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
}

function dot(a: number[], b: number[]): number {
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}
