#!/usr/bin/env node
/**
 * Command line entry point.
 *
 *   mpt-exporter export-model   --in model.json   --out dir [--name model]
 *   mpt-exporter export-dataset --in dataset.json --out dir [--name dataset]
 *
 * The --in file is a JSON description; see ModelSource / DatasetSource.
 */

import * as fs from 'fs';

import { exportDataset } from './dataset';
import { ExportError, exportModel } from './model';

interface CliArgs {
    command: string;
    input: string;
    out: string;
    name: string;
}

function parseArgs(argv: string[]): CliArgs {
    const [command, ...rest] = argv;
    const flags: Record<string, string> = {};
    for (let index = 0; index < rest.length; index += 2) {
        const flag = rest[index];
        const value = rest[index + 1];
        if (!flag.startsWith('--') || value === undefined) {
            throw new ExportError(`malformed flag pair near ${flag}`);
        }
        flags[flag.slice(2)] = value;
    }
    if (!flags.in || !flags.out) {
        throw new ExportError('--in and --out are required');
    }
    return {
        command,
        input: flags.in,
        out: flags.out,
        name: flags.name ?? (command === 'export-model' ? 'model' : 'dataset'),
    };
}

export function main(argv: string[]): number {
    let args: CliArgs;
    try {
        args = parseArgs(argv);
        const source = JSON.parse(fs.readFileSync(args.input, 'utf8'));
        if (args.command === 'export-model') {
            const manifest = exportModel(source, args.out, args.name);
            process.stdout.write(`${manifest}\n`);
        } else if (args.command === 'export-dataset') {
            const result = exportDataset(source, args.out, args.name);
            process.stdout.write(`${result.manifestPath}\n`);
            if (result.constantFeatures.length > 0) {
                process.stderr.write(
                    `warning: constant features ${JSON.stringify(result.constantFeatures)} `
                    + 'given unit divisors\n',
                );
            }
        } else {
            throw new ExportError(`unknown command ${args.command ?? '(none)'}`);
        }
    } catch (error) {
        process.stderr.write(`error: ${(error as Error).message}\n`);
        return 1;
    }
    return 0;
}

if (require.main === module) {
    process.exit(main(process.argv.slice(2)));
}
