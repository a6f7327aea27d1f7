/**
 * Minimal NPY v1.0 reader/writer for float32/float64 arrays.
 *
 * Little-endian, C-order only: the interchange subset the localization
 * pipeline consumes. Payloads are written through a DataView so the files
 * are identical regardless of host endianness.
 */

import * as fs from "node:fs";

const MAGIC = Buffer.from("\x93NUMPY", "latin1");

export interface NpyArray {
    shape: number[];
    dtype: "<f4" | "<f8";
    data: Float64Array;
}

function shapeRepr(shape: number[]): string {
    if (shape.length === 1) return `(${shape[0]},)`;
    return `(${shape.join(", ")})`;
}

export function encodeNpy(
    shape: number[],
    values: ArrayLike<number>,
    dtype: "<f4" | "<f8" = "<f4",
): Buffer {
    const count = shape.reduce((a, b) => a * b, 1);
    if (count !== values.length) {
        throw new Error(`shape ${shapeRepr(shape)} holds ${count} values, got ${values.length}`);
    }
    const header = `{'descr': '${dtype}', 'fortran_order': False, 'shape': ${shapeRepr(shape)}, }`;
    const base = MAGIC.length + 2 + 2;
    const pad = (64 - ((base + header.length + 1) % 64)) % 64;
    const headerBytes = Buffer.from(header + " ".repeat(pad) + "\n", "latin1");
    const itemSize = dtype === "<f4" ? 4 : 8;
    const payload = Buffer.alloc(count * itemSize);
    const view = new DataView(payload.buffer, payload.byteOffset, payload.byteLength);
    for (let i = 0; i < count; i++) {
        if (dtype === "<f4") view.setFloat32(i * 4, values[i], true);
        else view.setFloat64(i * 8, values[i], true);
    }
    const head = Buffer.alloc(base);
    MAGIC.copy(head, 0);
    head[6] = 1;
    head[7] = 0;
    head.writeUInt16LE(headerBytes.length, 8);
    return Buffer.concat([head, headerBytes, payload]);
}

export function writeNpy(
    path: string,
    shape: number[],
    values: ArrayLike<number>,
    dtype: "<f4" | "<f8" = "<f4",
): void {
    fs.writeFileSync(path, encodeNpy(shape, values, dtype));
}

export function decodeNpy(raw: Buffer): NpyArray {
    if (!raw.subarray(0, 6).equals(MAGIC)) {
        throw new Error("not an NPY file (bad magic)");
    }
    if (raw[6] !== 1 || raw[7] !== 0) {
        throw new Error(`unsupported NPY version ${raw[6]}.${raw[7]}`);
    }
    const headerLen = raw.readUInt16LE(8);
    const header = raw.subarray(10, 10 + headerLen).toString("latin1");
    const descr = /'descr':\s*'([^']+)'/.exec(header)?.[1];
    if (descr !== "<f4" && descr !== "<f8") {
        throw new Error(`unsupported dtype ${descr}`);
    }
    if (/'fortran_order':\s*True/.test(header)) {
        throw new Error("fortran_order arrays not supported");
    }
    const shapeText = /'shape':\s*\(([^)]*)\)/.exec(header)?.[1] ?? "";
    const shape = shapeText
        .split(",")
        .map((s) => s.trim())
        .filter((s) => s.length > 0)
        .map((s) => parseInt(s, 10));
    const count = shape.reduce((a, b) => a * b, 1);
    const itemSize = descr === "<f4" ? 4 : 8;
    const payload = raw.subarray(10 + headerLen);
    if (payload.length !== count * itemSize) {
        throw new Error(`truncated payload: ${payload.length} bytes for ${count} values`);
    }
    const view = new DataView(payload.buffer, payload.byteOffset, payload.byteLength);
    const data = new Float64Array(count);
    for (let i = 0; i < count; i++) {
        data[i] = descr === "<f4" ? view.getFloat32(i * 4, true) : view.getFloat64(i * 8, true);
    }
    for (let i = 0; i < count; i++) {
        if (!Number.isFinite(data[i])) throw new Error("payload contains NaN/Inf");
    }
    return { shape, dtype: descr, data };
}

export function readNpy(path: string): NpyArray {
    return decodeNpy(fs.readFileSync(path));
}
