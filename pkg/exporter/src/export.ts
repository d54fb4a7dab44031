/** Assemble a gramdyn frameset directory from a model forward pass, and
 *  re-run inference with a key-suppression blob applied as attention bias. */

import { mkdirSync, readFileSync, writeFileSync } from 'node:fs';
import { join } from 'node:path';

import { Frames, ForwardResult, ReferenceModel, SchemaError, Suppression } from './model.js';
import { readBlob, writeBlob } from './vg4t.js';

const FORMAT = 'gramdyn-frameset';
const VERSION = 1;

export interface ExportResult {
    outDir: string;
    layerIds: number[];
    tokenCount: number;
    result: ForwardResult;
}

function pad2(n: number): string {
    return String(n).padStart(2, '0');
}

export function exportFrameset(
    frames: Frames,
    model: ReferenceModel,
    outDir: string
): ExportResult {
    const res = model.forward(frames);
    writeFramesetDir(frames, model, res, outDir);
    return {
        outDir,
        layerIds: [...res.q.keys()].sort((a, b) => a - b),
        tokenCount: res.tokensPerFrame - 1,
        result: res,
    };
}

function writeFramesetDir(
    frames: Frames,
    model: ReferenceModel,
    res: ForwardResult,
    outDir: string
): void {
    const F = frames.frameCount;
    const H = frames.height;
    const W = frames.width;
    const P = model.config.patchSize;
    const np = res.tokensPerFrame - 1;
    const c = model.config.channels;
    mkdirSync(join(outDir, 'tensors'), { recursive: true });

    const tensors: Record<string, unknown> = {};
    writeBlob(join(outDir, 'tensors/images.vg4t'), {
        dtype: 'u8', dims: [F, H, W, 3], data: frames.pixels,
    });
    tensors['images'] = 'tensors/images.vg4t';
    writeBlob(join(outDir, 'tensors/depths.vg4t'), {
        dtype: 'f32', dims: [F, H, W], data: res.depths,
    });
    tensors['depths'] = 'tensors/depths.vg4t';
    writeBlob(join(outDir, 'tensors/features.vg4t'), {
        dtype: 'f32', dims: [F, np, c], data: res.features,
    });
    tensors['features'] = 'tensors/features.vg4t';

    const qPaths: Record<string, string> = {};
    const kPaths: Record<string, string> = {};
    const layerIds = [...res.q.keys()].sort((a, b) => a - b);
    for (const l of layerIds) {
        const qRel = `tensors/Q_${pad2(l)}.vg4t`;
        const kRel = `tensors/K_${pad2(l)}.vg4t`;
        writeBlob(join(outDir, qRel), { dtype: 'f32', dims: [F, np, c], data: res.q.get(l)! });
        writeBlob(join(outDir, kRel), { dtype: 'f32', dims: [F, np, c], data: res.k.get(l)! });
        qPaths[String(l)] = qRel;
        kPaths[String(l)] = kRel;
    }
    tensors['q'] = qPaths;
    tensors['k'] = kPaths;

    const manifest = {
        format: FORMAT,
        version: VERSION,
        frame_count: F,
        image_size: [H, W],
        patch_size: P,
        token_count: np,
        channel_dim: c,
        feature_dim: c,
        layer_ids: layerIds,
        cameras: res.cameras.map((cam) => ({
            fx: cam.fx, fy: cam.fy, cx: cam.cx, cy: cam.cy,
            rotation: cam.rotation, translation: cam.translation,
        })),
        tensors,
        meta: {
            model: model.id,
            revision: model.revision,
            heads: model.config.heads,
            head_dim: model.config.channels / model.config.heads,
            layer_map: Object.fromEntries(
                [...model.layerMap().entries()].map(([l, b]) => [String(l), b])
            ),
            tokens_per_frame: res.tokensPerFrame,
            image_token_offset: res.imageTokenOffset,
        },
    };
    writeFileSync(join(outDir, 'manifest.json'), JSON.stringify(manifest, null, 1));
}

/** Read a key_mask.vg4t blob (u8, [L, F, Np]) plus its JSON sidecar. */
export function loadSuppression(blobPath: string, F: number, np: number): Suppression {
    const blob = readBlob(blobPath);
    const sidecar = JSON.parse(
        readFileSync(blobPath.replace(/\.vg4t$/, '.json'), 'utf8')
    ) as { layers: number[]; mode: string };
    if (blob.dims.length !== 3) {
        throw new SchemaError(`key mask must be [layers, frames, tokens], got [${blob.dims}]`);
    }
    const [L, bf, bnp] = blob.dims;
    if (L !== sidecar.layers.length) {
        throw new SchemaError(
            `key mask has ${L} layer planes but the sidecar names ${sidecar.layers.length}`
        );
    }
    if (bf !== F || bnp !== np) {
        throw new SchemaError(
            `key mask is ${bf} x ${bnp} tokens but the model produces ${F} x ${np}`
        );
    }
    const data = blob.data;
    const mask: boolean[][][] = [];
    for (let i = 0; i < L; i++) {
        const plane: boolean[][] = [];
        for (let f = 0; f < F; f++) {
            const row: boolean[] = [];
            for (let p = 0; p < np; p++) row.push(data[(i * F + f) * np + p] !== 0);
            plane.push(row);
        }
        mask.push(plane);
    }
    return { layers: sidecar.layers, mask };
}

/** Fresh forward pass with suppressed keys; exports the resulting
 *  poses/depths (and re-captured tensors) as a frameset directory. */
export function rerunWithSuppression(
    frames: Frames,
    model: ReferenceModel,
    keyMaskPath: string,
    outDir: string
): ExportResult {
    const P = model.config.patchSize;
    const np = (frames.height / P) * (frames.width / P);
    const suppression = loadSuppression(keyMaskPath, frames.frameCount, np);
    const res = model.forward(frames, suppression);
    writeFramesetDir(frames, model, res, outDir);
    return {
        outDir,
        layerIds: [...res.q.keys()].sort((a, b) => a - b),
        tokenCount: np,
        result: res,
    };
}
