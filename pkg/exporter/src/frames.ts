/** Input clips: either a VG4T u8 blob of [F, H, W, 3] pixels, or a
 *  deterministic demo clip with a textured background and a moving square. */

import { Frames, SchemaError, ValidationError } from './model.js';
import { readBlob } from './vg4t.js';

export function framesFromBlob(path: string): Frames {
    const blob = readBlob(path);
    if (blob.dtype !== 'u8' || blob.dims.length !== 4 || blob.dims[3] !== 3) {
        throw new SchemaError(`frames blob must be u8 [F, H, W, 3], got ${blob.dtype} [${blob.dims}]`);
    }
    const [F, H, W] = blob.dims;
    if (F < 2) throw new ValidationError(`a clip needs F >= 2 frames, got ${F}`);
    return { frameCount: F, height: H, width: W, pixels: blob.data as Uint8Array };
}

export function demoFrames(frameCount = 4, height = 56, width = 56): Frames {
    if (frameCount < 2) throw new ValidationError('a clip needs F >= 2 frames');
    const pixels = new Uint8Array(frameCount * height * width * 3);
    const square = Math.floor(Math.min(height, width) / 4);
    for (let f = 0; f < frameCount; f++) {
        const sx = Math.floor(((f + 1) / (frameCount + 1)) * (width - square));
        const sy = Math.floor(height / 3);
        for (let y = 0; y < height; y++) {
            for (let x = 0; x < width; x++) {
                const i = ((f * height + y) * width + x) * 3;
                const checker = (Math.floor(x / 7) + Math.floor(y / 7)) % 2 === 0;
                pixels[i] = checker ? 170 : 90;
                pixels[i + 1] = checker ? 160 : 100;
                pixels[i + 2] = checker ? 150 : 120;
                if (x >= sx && x < sx + square && y >= sy && y < sy + square) {
                    pixels[i] = 220;
                    pixels[i + 1] = 60;
                    pixels[i + 2] = 50;
                }
            }
        }
    }
    return { frameCount, height, width, pixels };
}
