/**
 * Head fitting for the demo backbone: the conv stack keeps its seeded
 * random weights and the linear head is fit by full-batch gradient
 * descent on GAP features. The feature extraction is a forward pass on
 * whatever backend is active; the regression itself runs on plain typed
 * arrays, so no gradient kernels are required and the result is
 * bit-reproducible.
 */

import * as tf from "@tensorflow/tfjs";
import { chwToHwc, ImageLoader, readManifest } from "./dataset.js";

export interface TrainSpec {
    datasetManifest: string;
    sampleCount: number;
    /** gradient steps, in hundreds (a familiar epochs-like knob) */
    epochs: number;
}

function sigmoid(z: number): number {
    return z >= 0 ? 1 / (1 + Math.exp(-z)) : Math.exp(z) / (1 + Math.exp(z));
}

export async function trainOnDataset(
    model: tf.LayersModel, spec: TrainSpec,
): Promise<number> {
    const dataset = readManifest(spec.datasetManifest);
    const loader = new ImageLoader(dataset);
    const entries = dataset.samples.slice(0, spec.sampleCount);
    if (entries.length === 0) throw new Error("empty dataset");
    const first = loader.load(entries[0]);
    const [c, h, w] = first.shape;
    const n = entries.length;
    const m = dataset.num_classes;
    const xs = new Float32Array(n * c * h * w);
    const targets = new Float64Array(n * m);
    entries.forEach((entry, i) => {
        const image = loader.load(entry);
        xs.set(chwToHwc(image.shape, image.data), i * c * h * w);
        for (const label of entry.labels) targets[i * m + label] = 1;
    });

    const gap = model.layers[model.layers.length - 2];
    if (gap.getClassName() !== "GlobalAveragePooling2D") {
        throw new Error("model tail must be GAP then Dense");
    }
    const featModel = tf.model({
        inputs: model.inputs,
        outputs: gap.output as tf.SymbolicTensor,
    });
    const pooledT = tf.tidy(() => featModel.predict(
        tf.tensor4d(xs, [n, h, w, c])) as tf.Tensor2D);
    const k = pooledT.shape[1];
    const pooled = Float64Array.from(pooledT.dataSync()); // (N,K) row-major
    pooledT.dispose();

    // Standardize features for the fit; the normalization is folded back
    // into the exported head afterwards, so the model itself still maps
    // raw GAP features to logits.
    const mu = new Float64Array(k);
    const sd = new Float64Array(k);
    for (let f = 0; f < k; f++) {
        let total = 0;
        for (let i = 0; i < n; i++) total += pooled[i * k + f];
        mu[f] = total / n;
        let varsum = 0;
        for (let i = 0; i < n; i++) varsum += (pooled[i * k + f] - mu[f]) ** 2;
        sd[f] = Math.sqrt(varsum / n) || 1.0;
    }
    const feats = new Float64Array(n * k);
    for (let i = 0; i < n; i++) {
        for (let f = 0; f < k; f++) {
            feats[i * k + f] = (pooled[i * k + f] - mu[f]) / sd[f];
        }
    }

    const weights = new Float64Array(k * m); // (K,M) in standardized space
    const bias = new Float64Array(m);
    const vW = new Float64Array(k * m);
    const vB = new Float64Array(m);
    const steps = Math.max(1, spec.epochs) * 100;
    const lr = 1.0;
    const momentum = 0.9;
    const err = new Float64Array(n * m);
    let loss = Number.NaN;
    for (let step = 0; step < steps; step++) {
        loss = 0;
        for (let i = 0; i < n; i++) {
            for (let y = 0; y < m; y++) {
                let v = bias[y];
                for (let f = 0; f < k; f++) v += feats[i * k + f] * weights[f * m + y];
                const t = targets[i * m + y];
                loss += Math.max(v, 0) - v * t + Math.log1p(Math.exp(-Math.abs(v)));
                err[i * m + y] = sigmoid(v) - t;
            }
        }
        loss /= n * m;
        const scale = lr / (n * m);
        for (let f = 0; f < k; f++) {
            for (let y = 0; y < m; y++) {
                let g = 0;
                for (let i = 0; i < n; i++) g += feats[i * k + f] * err[i * m + y];
                const idx = f * m + y;
                vW[idx] = momentum * vW[idx] - scale * g;
                weights[idx] += vW[idx];
            }
        }
        for (let y = 0; y < m; y++) {
            let g = 0;
            for (let i = 0; i < n; i++) g += err[i * m + y];
            vB[y] = momentum * vB[y] - scale * g;
            bias[y] += vB[y];
        }
    }

    // Fold the standardization into raw-feature space.
    const dense = model.layers[model.layers.length - 1];
    const kernel = new Float64Array(k * m);
    const rawBias = Float64Array.from(bias);
    for (let f = 0; f < k; f++) {
        for (let y = 0; y < m; y++) {
            kernel[f * m + y] = weights[f * m + y] / sd[f];
            rawBias[y] -= weights[f * m + y] * mu[f] / sd[f];
        }
    }
    dense.setWeights([
        tf.tensor2d(Float32Array.from(kernel), [k, m]),
        tf.tensor1d(Float32Array.from(rawBias)),
    ]);
    return loss;
}
