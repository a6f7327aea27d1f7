/**
 * Exporter commands:
 *   make-model --out DIR [--dataset MANIFEST --train-count N --epochs N --seed N]
 *   export     --model DIR --dataset MANIFEST --out DIR [--limit N] [--ids a,b,c]
 *   demo       --dataset MANIFEST --out DIR [--limit N]
 */

import * as path from "node:path";
import { initBackend } from "./backend.js";
import { buildModel, saveModel } from "./model.js";
import { crossCheck, runExport } from "./export.js";
import { trainOnDataset } from "./train.js";

function parseArgs(argv: string[]): Map<string, string> {
    const out = new Map<string, string>();
    for (let i = 0; i < argv.length; i += 2) {
        const key = argv[i];
        if (!key.startsWith("--") || i + 1 >= argv.length) {
            throw new Error(`malformed arguments near ${key}`);
        }
        out.set(key.slice(2), argv[i + 1]);
    }
    return out;
}

function need(args: Map<string, string>, key: string): string {
    const value = args.get(key);
    if (value === undefined) throw new Error(`missing --${key}`);
    return value;
}

async function makeModel(args: Map<string, string>): Promise<void> {
    const out = need(args, "out");
    const seed = parseInt(args.get("seed") ?? "7", 10);
    const model = buildModel(seed);
    const dataset = args.get("dataset");
    if (dataset) {
        const loss = await trainOnDataset(model, {
            datasetManifest: dataset,
            sampleCount: parseInt(args.get("train-count") ?? "200", 10),
            epochs: parseInt(args.get("epochs") ?? "40", 10),
        });
        console.log(`trained: final loss ${loss.toFixed(4)}`);
    }
    await saveModel(model, out);
    console.log(`model saved to ${out}`);
}

async function exportCmd(args: Map<string, string>): Promise<void> {
    const result = await runExport({
        modelDir: need(args, "model"),
        datasetManifest: need(args, "dataset"),
        outDir: need(args, "out"),
        limit: parseInt(args.get("limit") ?? "0", 10),
        sampleIds: args.get("ids")?.split(",") ?? undefined,
    });
    const worst = crossCheck(need(args, "out"));
    console.log(
        `exported ${result.samples} samples (${result.numFeatures} maps of ` +
        `${result.gridShape[0]}x${result.gridShape[1]}) to ${result.manifestPath}`);
    console.log(`self cross-check: max |recomputed - exported| logit = ${worst.toExponential(2)}`);
    if (worst > 1e-3) {
        throw new Error("self cross-check exceeded 1e-3");
    }
}

async function demo(args: Map<string, string>): Promise<void> {
    const dataset = need(args, "dataset");
    const out = need(args, "out");
    const modelDir = path.join(out, "model");
    await makeModel(new Map([
        ["out", modelDir],
        ["dataset", dataset],
        ["train-count", args.get("train-count") ?? "200"],
        ["epochs", args.get("epochs") ?? "40"],
        ["seed", args.get("seed") ?? "7"],
    ]));
    await exportCmd(new Map([
        ["model", modelDir],
        ["dataset", dataset],
        ["out", out],
        ["limit", args.get("limit") ?? "24"],
    ]));
}

async function main(): Promise<void> {
    const [command, ...rest] = process.argv.slice(2);
    const args = parseArgs(rest);
    console.log(`backend: ${await initBackend()}`);
    if (command === "make-model") await makeModel(args);
    else if (command === "export") await exportCmd(args);
    else if (command === "demo") await demo(args);
    else {
        console.error("usage: cli.js {make-model|export|demo} --flag value ...");
        process.exitCode = 2;
        return;
    }
}

main().catch((err) => {
    console.error(String(err?.message ?? err));
    process.exitCode = 1;
});
