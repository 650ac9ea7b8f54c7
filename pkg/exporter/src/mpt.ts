/**
 * Portable tensor format: "MPT1" magic, u32 LE rank, rank x u64 LE extents,
 * then row-major float64 LE payload.
 */

import * as fs from 'fs';

export const MAGIC = 'MPT1';

// Hard cap on total element count; anything larger is a corrupt header.
const MAX_ELEMENTS = 2 ** 40;

export class TensorFormatError extends Error {}
export class BadMagicError extends TensorFormatError {}
export class TruncatedPayloadError extends TensorFormatError {}
export class ExtentOverflowError extends TensorFormatError {}

export interface Tensor {
    shape: number[];
    data: Float64Array;
}

export function elementCount(shape: number[]): number {
    return shape.reduce((count, extent) => count * extent, 1);
}

/** Serialize a tensor to the portable byte layout. */
export function tensorBytes(tensor: Tensor): Buffer {
    const { shape, data } = tensor;
    if (elementCount(shape) !== data.length) {
        throw new TensorFormatError(
            `shape [${shape}] declares ${elementCount(shape)} elements, data has ${data.length}`,
        );
    }
    for (const value of data) {
        if (!Number.isFinite(value)) {
            throw new TensorFormatError('refusing to serialize non-finite tensor');
        }
    }
    const header = Buffer.alloc(8 + 8 * shape.length);
    header.write(MAGIC, 0, 'ascii');
    header.writeUInt32LE(shape.length, 4);
    shape.forEach((extent, index) => {
        header.writeBigUInt64LE(BigInt(extent), 8 + 8 * index);
    });
    const payload = Buffer.alloc(8 * data.length);
    data.forEach((value, index) => payload.writeDoubleLE(value, 8 * index));
    return Buffer.concat([header, payload]);
}

export function writeTensor(path: string, tensor: Tensor): void {
    fs.writeFileSync(path, tensorBytes(tensor));
}

export function parseTensor(raw: Buffer, label = 'tensor'): Tensor {
    if (raw.length < 4 || raw.toString('ascii', 0, 4) !== MAGIC) {
        throw new BadMagicError(`${label}: missing tensor magic bytes`);
    }
    if (raw.length < 8) {
        throw new TruncatedPayloadError(`${label}: header truncated`);
    }
    const rank = raw.readUInt32LE(4);
    if (raw.length < 8 + 8 * rank) {
        throw new TruncatedPayloadError(`${label}: extent table truncated`);
    }
    const shape: number[] = [];
    for (let index = 0; index < rank; index += 1) {
        shape.push(Number(raw.readBigUInt64LE(8 + 8 * index)));
    }
    const count = elementCount(shape);
    if (count > MAX_ELEMENTS) {
        throw new ExtentOverflowError(`${label}: ${count} elements declared`);
    }
    const offset = 8 + 8 * rank;
    if (raw.length < offset + 8 * count) {
        throw new TruncatedPayloadError(
            `${label}: payload has ${raw.length - offset} bytes, expected ${8 * count}`,
        );
    }
    const data = new Float64Array(count);
    for (let index = 0; index < count; index += 1) {
        data[index] = raw.readDoubleLE(offset + 8 * index);
    }
    return { shape, data };
}

export function readTensor(path: string): Tensor {
    return parseTensor(fs.readFileSync(path), path);
}

/** Flatten nested number arrays row-major, verifying rectangularity. */
export function fromNested(nested: unknown): Tensor {
    const shape: number[] = [];
    let level: unknown = nested;
    while (Array.isArray(level)) {
        shape.push(level.length);
        level = level[0];
    }
    const data = new Float64Array(elementCount(shape));
    let cursor = 0;
    const walk = (node: unknown, depth: number): void => {
        if (depth === shape.length) {
            if (typeof node !== 'number') {
                throw new TensorFormatError('tensor leaf is not a number');
            }
            data[cursor] = node;
            cursor += 1;
            return;
        }
        if (!Array.isArray(node) || node.length !== shape[depth]) {
            throw new TensorFormatError('ragged nested array is not a tensor');
        }
        node.forEach((child) => walk(child, depth + 1));
    };
    walk(nested, 0);
    return { shape, data };
}
