/** Exporter command line.
 *
 *  Export a clip through the reference model into a frameset directory:
 *      node dist/cli.js --frames clip.vg4t --out runs/exported
 *      node dist/cli.js --demo-frames 4x56x56 --out runs/exported
 *
 *  Re-run with key suppression applied in the mapped global blocks:
 *      node dist/cli.js --frames clip.vg4t --key-mask key_mask.vg4t --out runs/masked
 */

import { parseArgs } from 'node:util';

import { exportFrameset, rerunWithSuppression } from './export.js';
import { demoFrames, framesFromBlob } from './frames.js';
import { DEFAULT_CONFIG, ReferenceModel } from './model.js';

export function main(argv: string[]): number {
    const { values } = parseArgs({
        args: argv,
        options: {
            model: { type: 'string', default: 'ref-mvt-tiny' },
            seed: { type: 'string', default: String(DEFAULT_CONFIG.seed) },
            frames: { type: 'string' },
            'demo-frames': { type: 'string' },
            'key-mask': { type: 'string' },
            out: { type: 'string' },
            help: { type: 'boolean', default: false },
        },
    });
    if (values.help || !values.out) {
        console.log(
            'usage: cli --out DIR [--frames clip.vg4t | --demo-frames FxHxW] ' +
            '[--key-mask key_mask.vg4t] [--model ID] [--seed N]'
        );
        return values.help ? 0 : 2;
    }
    if (values.model !== 'ref-mvt-tiny') {
        console.error(`EnvironmentError: model ${values.model} is not available`);
        return 1;
    }
    try {
        const model = new ReferenceModel({ ...DEFAULT_CONFIG, seed: Number(values.seed) });
        const frames = values.frames
            ? framesFromBlob(values.frames)
            : (() => {
                const dims = (values['demo-frames'] ?? '4x56x56').split('x').map(Number);
                return demoFrames(dims[0], dims[1], dims[2]);
            })();
        const res = values['key-mask']
            ? rerunWithSuppression(frames, model, values['key-mask'], values.out)
            : exportFrameset(frames, model, values.out);
        console.log(
            `wrote frameset: ${res.outDir} (F=${frames.frameCount}, Np=${res.tokenCount}, ` +
            `layers=${res.layerIds.length})`
        );
        for (const probe of res.result.probes) {
            console.log(
                `  block ${probe.physicalBlock} (layer ${probe.logicalLayer}): ` +
                `max suppressed mass ${probe.maxSuppressedMass.toExponential(2)}`
            );
        }
        return 0;
    } catch (err) {
        console.error(`${(err as Error).constructor.name}: ${(err as Error).message}`);
        return 1;
    }
}

if (process.argv[1] && process.argv[1].endsWith('cli.js')) {
    process.exit(main(process.argv.slice(2)));
}
