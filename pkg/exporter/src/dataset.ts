/**
 * Dataset export: z-normalize (or record supplied stats verbatim), derive
 * search bounds, and emit the tensor + manifest layout the margin toolkit
 * loads.  Zero-variance features get a unit divisor and are flagged.
 */

import * as crypto from 'crypto';
import * as fs from 'fs';
import * as path from 'path';

import { Tensor, tensorBytes } from './mpt';
import { ExportError } from './model';

export interface DatasetSource {
    inputs: number[][];
    labels: number[];
    num_classes: number;
    /** Stats recorded verbatim; when given, inputs are taken as normalized. */
    mean?: number[];
    std?: number[];
}

export interface DatasetExportResult {
    manifestPath: string;
    /** Feature indices whose variance was zero (unit divisor substituted). */
    constantFeatures: number[];
}

function sha256(bytes: Buffer): string {
    return crypto.createHash('sha256').update(bytes).digest('hex');
}

function columnStats(inputs: number[][]): { mean: number[]; std: number[]; flagged: number[] } {
    const rows = inputs.length;
    const cols = inputs[0].length;
    const mean = new Array<number>(cols).fill(0);
    for (const row of inputs) {
        row.forEach((value, col) => { mean[col] += value / rows; });
    }
    const std = new Array<number>(cols).fill(0);
    for (const row of inputs) {
        row.forEach((value, col) => { std[col] += (value - mean[col]) ** 2 / rows; });
    }
    const flagged: number[] = [];
    for (let col = 0; col < cols; col += 1) {
        std[col] = Math.sqrt(std[col]);
        if (std[col] === 0) {
            std[col] = 1;
            flagged.push(col);
        }
    }
    return { mean, std, flagged };
}

export function exportDataset(
    source: DatasetSource,
    outDir: string,
    name: string,
): DatasetExportResult {
    const { inputs, labels } = source;
    if (inputs.length === 0 || inputs[0].length === 0) {
        throw new ExportError('dataset needs at least one sample and one feature');
    }
    if (labels.length !== inputs.length) {
        throw new ExportError('labels must align with inputs');
    }
    const cols = inputs[0].length;
    for (const row of inputs) {
        if (row.length !== cols) {
            throw new ExportError('ragged input rows');
        }
        for (const value of row) {
            if (!Number.isFinite(value)) {
                throw new ExportError('non-finite input value');
            }
        }
    }
    for (const label of labels) {
        if (!Number.isInteger(label) || label < 0 || label >= source.num_classes) {
            throw new ExportError(`label ${label} outside [0, ${source.num_classes})`);
        }
    }
    if ((source.mean === undefined) !== (source.std === undefined)) {
        throw new ExportError('mean and std must be supplied together');
    }

    let mean: number[];
    let std: number[];
    let normalized: number[][];
    let constantFeatures: number[] = [];
    if (source.mean !== undefined && source.std !== undefined) {
        if (source.mean.length !== cols || source.std.length !== cols) {
            throw new ExportError('supplied stats do not match the feature count');
        }
        if (source.std.some((value) => value <= 0)) {
            throw new ExportError('supplied std must be positive');
        }
        mean = source.mean;
        std = source.std;
        normalized = inputs;
    } else {
        const stats = columnStats(inputs);
        mean = stats.mean;
        std = stats.std;
        constantFeatures = stats.flagged;
        normalized = inputs.map((row) => row.map((value, col) => (value - mean[col]) / std[col]));
    }

    const lower = new Array<number>(cols).fill(Infinity);
    const upper = new Array<number>(cols).fill(-Infinity);
    for (const row of normalized) {
        row.forEach((value, col) => {
            lower[col] = Math.min(lower[col], value);
            upper[col] = Math.max(upper[col], value);
        });
    }

    const vector = (values: number[]): Tensor => (
        { shape: [values.length], data: Float64Array.from(values) }
    );
    const matrix: Tensor = {
        shape: [normalized.length, cols],
        data: Float64Array.from(normalized.flat()),
    };
    const tensors: Record<string, Tensor> = {
        inputs: matrix,
        labels: vector(labels),
        mean: vector(mean),
        std: vector(std),
        lower: vector(lower),
        upper: vector(upper),
    };

    const files: Record<string, string> = {};
    const planned: Array<{ relative: string; bytes: Buffer }> = [];
    for (const key of Object.keys(tensors)) {
        const relative = `${name}_${key}.mpt`;
        files[key] = relative;
        planned.push({ relative, bytes: tensorBytes(tensors[key]) });
    }
    const manifest = { num_classes: source.num_classes, tensors: files };
    planned.push({
        relative: `${name}_manifest.json`,
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
    return {
        manifestPath: path.join(outDir, `${name}_manifest.json`),
        constantFeatures,
    };
}
