/**
 * Model export: turn an ordered layer description into the manifest + .mpt
 * layout the margin toolkit loads, together with a self-check bundle
 * (a fixed input tensor and the logits this exporter computes for it).
 *
 * Everything is validated and serialized in memory first; no file is
 * written until the whole plan is known to be sound.
 */

import * as crypto from 'crypto';
import * as fs from 'fs';
import * as path from 'path';

import { Tensor, elementCount, fromNested, tensorBytes } from './mpt';

export interface DenseSpec {
    kind: 'dense';
    weight: number[][];
    bias: number[];
}

export interface Conv2dSpec {
    kind: 'conv2d';
    weight: number[][][][]; // (out_ch, in_ch, kh, kw)
    bias: number[];
    stride?: number;
}

export interface BatchNormSpec {
    kind: 'batchnorm-inference';
    scale: number[];
    shift: number[];
    running_mean: number[];
    running_var: number[];
    epsilon?: number;
}

export interface StatelessSpec {
    kind: 'relu' | 'flatten' | 'maxpool2x2';
}

export type LayerSpec = DenseSpec | Conv2dSpec | BatchNormSpec | StatelessSpec;

export interface ModelSource {
    num_classes: number;
    input_shape: number[];
    layers: LayerSpec[];
}

export class ExportError extends Error {}

const SUPPORTED_KINDS = new Set([
    'dense', 'conv2d', 'batchnorm-inference', 'relu', 'flatten', 'maxpool2x2',
]);

interface PlannedFile {
    relative: string;
    bytes: Buffer;
}

function sha256(bytes: Buffer): string {
    return crypto.createHash('sha256').update(bytes).digest('hex');
}

/** Deterministic pseudo-random check input (no RNG dependency). */
function checkInput(shape: number[]): Tensor {
    const data = new Float64Array(elementCount(shape));
    let state = 0x9e3779b9;
    for (let index = 0; index < data.length; index += 1) {
        state = (Math.imul(state, 1664525) + 1013904223) >>> 0;
        data[index] = (state / 2 ** 32) * 2 - 1;
    }
    return { shape, data };
}

function denseForward(layer: DenseSpec, value: Tensor): Tensor {
    const weight = fromNested(layer.weight);
    const bias = fromNested(layer.bias);
    const [outDim, inDim] = weight.shape;
    if (value.data.length !== inDim) {
        throw new ExportError(`dense expects ${inDim} inputs, got ${value.data.length}`);
    }
    const out = new Float64Array(outDim);
    for (let row = 0; row < outDim; row += 1) {
        let acc = bias.data[row];
        for (let col = 0; col < inDim; col += 1) {
            acc += weight.data[row * inDim + col] * value.data[col];
        }
        out[row] = acc;
    }
    return { shape: [outDim], data: out };
}

function conv2dForward(layer: Conv2dSpec, value: Tensor): Tensor {
    const weight = fromNested(layer.weight);
    const bias = fromNested(layer.bias);
    const stride = layer.stride ?? 1;
    const [outCh, inCh, kh, kw] = weight.shape;
    const [ch, height, width] = value.shape;
    if (ch !== inCh) {
        throw new ExportError(`conv2d expects ${inCh} channels, got ${ch}`);
    }
    const outH = Math.floor((height - kh) / stride) + 1;
    const outW = Math.floor((width - kw) / stride) + 1;
    if (outH < 1 || outW < 1) {
        throw new ExportError('conv2d kernel larger than its input');
    }
    const out = new Float64Array(outCh * outH * outW);
    for (let oc = 0; oc < outCh; oc += 1) {
        for (let oy = 0; oy < outH; oy += 1) {
            for (let ox = 0; ox < outW; ox += 1) {
                let acc = bias.data[oc];
                for (let ic = 0; ic < inCh; ic += 1) {
                    for (let ky = 0; ky < kh; ky += 1) {
                        for (let kx = 0; kx < kw; kx += 1) {
                            const vy = oy * stride + ky;
                            const vx = ox * stride + kx;
                            acc += weight.data[((oc * inCh + ic) * kh + ky) * kw + kx]
                                * value.data[(ic * height + vy) * width + vx];
                        }
                    }
                }
                out[(oc * outH + oy) * outW + ox] = acc;
            }
        }
    }
    return { shape: [outCh, outH, outW], data: out };
}

function maxPoolForward(value: Tensor): Tensor {
    const [ch, height, width] = value.shape;
    if (height % 2 !== 0 || width % 2 !== 0) {
        throw new ExportError('maxpool2x2 needs even spatial extents');
    }
    const outH = height / 2;
    const outW = width / 2;
    const out = new Float64Array(ch * outH * outW);
    for (let c = 0; c < ch; c += 1) {
        for (let oy = 0; oy < outH; oy += 1) {
            for (let ox = 0; ox < outW; ox += 1) {
                let best = -Infinity;
                for (let dy = 0; dy < 2; dy += 1) {
                    for (let dx = 0; dx < 2; dx += 1) {
                        const v = value.data[(c * height + 2 * oy + dy) * width + 2 * ox + dx];
                        if (v > best) best = v;
                    }
                }
                out[(c * outH + oy) * outW + ox] = best;
            }
        }
    }
    return { shape: [ch, outH, outW], data: out };
}

function batchNormForward(layer: BatchNormSpec, value: Tensor): Tensor {
    const scale = fromNested(layer.scale);
    const shift = fromNested(layer.shift);
    const mean = fromNested(layer.running_mean);
    const variance = fromNested(layer.running_var);
    const epsilon = layer.epsilon ?? 1e-5;
    const channels = scale.data.length;
    if (value.shape[0] !== channels) {
        throw new ExportError(`batchnorm expects ${channels} channels, got ${value.shape[0]}`);
    }
    for (const v of variance.data) {
        if (v <= 0) throw new ExportError('batchnorm running variance must be positive');
    }
    const perChannel = value.data.length / channels;
    const out = new Float64Array(value.data.length);
    for (let c = 0; c < channels; c += 1) {
        const denom = Math.sqrt(variance.data[c] + epsilon);
        for (let k = 0; k < perChannel; k += 1) {
            const index = c * perChannel + k;
            out[index] = scale.data[c] * (value.data[index] - mean.data[c]) / denom
                + shift.data[c];
        }
    }
    return { shape: [...value.shape], data: out };
}

function layerForward(layer: LayerSpec, value: Tensor): Tensor {
    switch (layer.kind) {
        case 'dense':
            return denseForward(layer, value);
        case 'conv2d':
            return conv2dForward(layer, value);
        case 'batchnorm-inference':
            return batchNormForward(layer, value);
        case 'relu':
            return { shape: [...value.shape], data: value.data.map((v) => Math.max(v, 0)) };
        case 'flatten':
            return { shape: [value.data.length], data: value.data };
        case 'maxpool2x2':
            return maxPoolForward(value);
        default:
            throw new ExportError(`unsupported layer kind ${(layer as { kind: string }).kind}`);
    }
}

/**
 * Export a model description; returns the manifest path.  Aborts before
 * writing anything when a layer is unsupported or shapes do not chain.
 */
export function exportModel(source: ModelSource, outDir: string, name: string): string {
    if (!Number.isInteger(source.num_classes) || source.num_classes < 2) {
        throw new ExportError('num_classes must be an integer >= 2');
    }
    for (const layer of source.layers) {
        if (!SUPPORTED_KINDS.has(layer.kind)) {
            throw new ExportError(`unsupported layer kind ${layer.kind}`);
        }
    }

    const planned: PlannedFile[] = [];
    const entries: Record<string, unknown>[] = [];
    source.layers.forEach((layer, position) => {
        const entry: Record<string, unknown> = { kind: layer.kind };
        if (layer.kind === 'dense' || layer.kind === 'conv2d') {
            const weightRel = `${name}_l${position}_w.mpt`;
            const biasRel = `${name}_l${position}_b.mpt`;
            planned.push({ relative: weightRel, bytes: tensorBytes(fromNested(layer.weight)) });
            planned.push({ relative: biasRel, bytes: tensorBytes(fromNested(layer.bias)) });
            entry.weight = weightRel;
            entry.bias = biasRel;
            if (layer.kind === 'conv2d') entry.stride = layer.stride ?? 1;
        } else if (layer.kind === 'batchnorm-inference') {
            const parts: Array<[keyof BatchNormSpec & string, string]> = [
                ['scale', 'scale'], ['shift', 'shift'],
                ['running_mean', 'mean'], ['running_var', 'var'],
            ];
            for (const [field, tag] of parts) {
                const rel = `${name}_l${position}_${tag}.mpt`;
                planned.push({ relative: rel, bytes: tensorBytes(fromNested(layer[field])) });
                entry[field] = rel;
            }
            entry.epsilon = layer.epsilon ?? 1e-5;
        }
        entries.push(entry);
    });

    // Run the reference forward once: this both validates shape chaining and
    // produces the self-check logits.
    const input = checkInput(source.input_shape);
    let value: Tensor = input;
    for (const layer of source.layers) {
        value = layerForward(layer, value);
    }
    if (value.data.length !== source.num_classes) {
        throw new ExportError(
            `final layer emits ${value.data.length} values, expected ${source.num_classes} logits`,
        );
    }

    const flatInput = { shape: [input.data.length], data: input.data };
    planned.push({ relative: `${name}_check_input.mpt`, bytes: tensorBytes(flatInput) });
    planned.push({ relative: `${name}_check_logits.mpt`, bytes: tensorBytes(value) });

    const manifest = {
        input_shape: source.input_shape,
        layers: entries,
        num_classes: source.num_classes,
    };
    planned.push({
        relative: `${name}_model.json`,
        bytes: Buffer.from(JSON.stringify(manifest, null, 2)),
    });
    const checksums: Record<string, string> = {};
    for (const file of planned.slice().sort((a, b) => a.relative.localeCompare(b.relative))) {
        checksums[file.relative] = sha256(file.bytes);
    }
    planned.push({
        relative: `${name}_checksums.json`,
        bytes: Buffer.from(JSON.stringify(checksums, null, 2)),
    });

    fs.mkdirSync(outDir, { recursive: true });
    for (const file of planned) {
        fs.writeFileSync(path.join(outDir, file.relative), file.bytes);
    }
    return path.join(outDir, `${name}_model.json`);
}
