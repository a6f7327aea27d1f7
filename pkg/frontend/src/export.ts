/**
 * The export routine: run images through a GAP-headed classifier, dump
 * per-sample final-conv feature stacks and logits plus the head arrays,
 * and write a manifest the localization pipeline can validate and consume.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import * as tf from "@tensorflow/tfjs";
import { chwToHwc, ImageLoader, readManifest } from "./dataset.js";
import { exportHead, hookFinalConv, loadModel } from "./model.js";
import { readNpy, writeNpy } from "./npy.js";

export interface ExportSpec {
    modelDir: string;
    datasetManifest: string;
    outDir: string;
    /** cap on exported samples; 0 means all */
    limit: number;
    sampleIds?: string[];
}

export interface ExportResult {
    manifestPath: string;
    samples: number;
    numFeatures: number;
    gridShape: [number, number];
}

export async function runExport(spec: ExportSpec): Promise<ExportResult> {
    const model = await loadModel(spec.modelDir);
    const hooked = hookFinalConv(model);
    const dataset = readManifest(spec.datasetManifest);
    const loader = new ImageLoader(dataset);

    let entries = dataset.samples;
    if (spec.sampleIds && spec.sampleIds.length > 0) {
        const wanted = new Set(spec.sampleIds);
        entries = entries.filter((e) => wanted.has(e.id));
    }
    if (spec.limit > 0) entries = entries.slice(0, spec.limit);
    if (entries.length === 0) throw new Error("no samples selected for export");

    fs.mkdirSync(spec.outDir, { recursive: true });
    const head = exportHead(hooked);
    writeNpy(path.join(spec.outDir, "weights.npy"),
        [hooked.numClasses, hooked.numFeatures], head.weights);
    writeNpy(path.join(spec.outDir, "bias.npy"), [hooked.numClasses], head.bias);

    const manifestSamples = [];
    for (const entry of entries) {
        const image = loader.load(entry);
        const [c, h, w] = image.shape;
        const { features, logits } = tf.tidy(() => {
            const input = tf.tensor4d(chwToHwc(image.shape, image.data), [1, h, w, c]);
            const [feat, out] = hooked.extractor.predict(input) as tf.Tensor[];
            return {
                features: feat.transpose([0, 3, 1, 2]).squeeze([0]),
                logits: out.squeeze([0]),
            };
        });
        const featName = `feat_${entry.id}.npy`;
        const logitName = `logits_${entry.id}.npy`;
        writeNpy(path.join(spec.outDir, featName),
            features.shape as number[], features.dataSync());
        writeNpy(path.join(spec.outDir, logitName),
            [hooked.numClasses], logits.dataSync());
        features.dispose();
        logits.dispose();
        manifestSamples.push({
            id: entry.id,
            features: featName,
            logits: logitName,
            image_size: entry.image_size,
            labels: entry.labels,
            gt_boxes: entry.gt_boxes,
        });
    }

    const manifestPath = path.join(spec.outDir, "manifest.json");
    const doc = {
        bias: "bias.npy",
        head_mode: "softmax",
        num_classes: hooked.numClasses,
        samples: manifestSamples,
        weights: "weights.npy",
    };
    fs.writeFileSync(manifestPath, JSON.stringify(doc, null, 2) + "\n");
    return {
        manifestPath,
        samples: manifestSamples.length,
        numFeatures: hooked.numFeatures,
        gridShape: hooked.gridShape,
    };
}

/**
 * TS-side mirror of the pipeline's logit recomputation: sum-pooled features
 * times the exported head must match the exported logits. Returns the max
 * absolute difference across samples.
 */
export function crossCheck(outDir: string): number {
    const doc = JSON.parse(fs.readFileSync(path.join(outDir, "manifest.json"), "utf8"));
    const weights = readNpy(path.join(outDir, doc.weights));
    const bias = readNpy(path.join(outDir, doc.bias));
    const [m, k] = weights.shape;
    let worst = 0;
    for (const sample of doc.samples) {
        const feat = readNpy(path.join(outDir, sample.features));
        const logits = readNpy(path.join(outDir, sample.logits));
        const [kk, h, w] = feat.shape;
        if (kk !== k) throw new Error("feature count mismatch");
        const pooled = new Float64Array(k);
        for (let ch = 0; ch < k; ch++) {
            let total = 0;
            for (let i = 0; i < h * w; i++) total += feat.data[ch * h * w + i];
            pooled[ch] = total;
        }
        for (let y = 0; y < m; y++) {
            let n = bias.data[y];
            for (let ch = 0; ch < k; ch++) n += weights.data[y * k + ch] * pooled[ch];
            worst = Math.max(worst, Math.abs(n - logits.data[y]));
        }
    }
    return worst;
}
