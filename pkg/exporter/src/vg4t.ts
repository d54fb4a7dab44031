/** VG4T binary tensor blobs, matching the gramdyn on-disk format:
 *  magic "VG4T", version u16 LE = 1, dtype u8 (0 = f32-le, 1 = u8),
 *  ndim u8, ndim x u32 LE dims, row-major payload. */

import { readFileSync, writeFileSync } from 'node:fs';

export class FormatError extends Error {}
export class SchemaError extends Error {}

const MAGIC = 'VG4T';
const VERSION = 1;

export interface Blob {
    dtype: 'f32' | 'u8';
    dims: number[];
    data: Float32Array | Uint8Array;
}

export function encodeBlob(blob: Blob): Buffer {
    const count = blob.dims.reduce((a, b) => a * b, 1);
    if (blob.dims.length === 0 || blob.dims.some((d) => d < 1)) {
        throw new SchemaError(`blob dims must be non-empty and >= 1, got [${blob.dims}]`);
    }
    if (blob.data.length !== count) {
        throw new SchemaError(`payload length ${blob.data.length} != product of dims ${count}`);
    }
    const header = Buffer.alloc(8 + 4 * blob.dims.length);
    header.write(MAGIC, 0, 'ascii');
    header.writeUInt16LE(VERSION, 4);
    header.writeUInt8(blob.dtype === 'f32' ? 0 : 1, 6);
    header.writeUInt8(blob.dims.length, 7);
    blob.dims.forEach((d, i) => header.writeUInt32LE(d, 8 + 4 * i));
    const payload =
        blob.dtype === 'f32'
            ? Buffer.from((blob.data as Float32Array).buffer, blob.data.byteOffset, count * 4)
            : Buffer.from(blob.data as Uint8Array);
    return Buffer.concat([header, payload]);
}

export function writeBlob(path: string, blob: Blob): void {
    writeFileSync(path, encodeBlob(blob));
}

export function decodeBlob(raw: Buffer): Blob {
    if (raw.length < 8 || raw.toString('ascii', 0, 4) !== MAGIC) {
        throw new FormatError('bad magic, not a VG4T blob');
    }
    const version = raw.readUInt16LE(4);
    if (version !== VERSION) throw new FormatError(`unsupported version ${version}`);
    const code = raw.readUInt8(6);
    const ndim = raw.readUInt8(7);
    if (code > 1) throw new FormatError(`unknown dtype code ${code}`);
    const dims: number[] = [];
    for (let i = 0; i < ndim; i++) dims.push(raw.readUInt32LE(8 + 4 * i));
    const count = dims.reduce((a, b) => a * b, 1);
    const offset = 8 + 4 * ndim;
    const itemSize = code === 0 ? 4 : 1;
    if (raw.length - offset !== count * itemSize) {
        throw new SchemaError(
            `payload is ${raw.length - offset} bytes, dims [${dims}] require ${count * itemSize}`
        );
    }
    if (code === 0) {
        const data = new Float32Array(count);
        for (let i = 0; i < count; i++) data[i] = raw.readFloatLE(offset + 4 * i);
        return { dtype: 'f32', dims, data };
    }
    return { dtype: 'u8', dims, data: new Uint8Array(raw.subarray(offset)) };
}

export function readBlob(path: string): Blob {
    return decodeBlob(readFileSync(path));
}
