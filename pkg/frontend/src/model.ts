/**
 * GAP-headed classifier construction, file persistence, and the structural
 * guard that export refuses anything whose head is not GAP-then-linear.
 *
 * tfjs in plain Node has no file:// IO handler, so save/load go through
 * in-memory artifacts serialized to model.json + weights.bin.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import * as tf from "@tensorflow/tfjs";

export interface HookedModel {
    model: tf.LayersModel;
    /** rank-4 final-conv activations feeding global average pooling */
    extractor: tf.LayersModel;
    gridShape: [number, number]; // (H, W) of the hooked layer
    numFeatures: number;
    numClasses: number;
}

export function buildModel(seed = 7, inputShape: [number, number, number] = [28, 56, 1]): tf.LayersModel {
    let s = seed;
    const init = () => tf.initializers.glorotUniform({ seed: s++ });
    const model = tf.sequential();
    model.add(tf.layers.conv2d({
        inputShape, filters: 8, kernelSize: 3, padding: "same",
        activation: "relu", kernelInitializer: init(),
    }));
    model.add(tf.layers.maxPooling2d({ poolSize: 2 }));
    model.add(tf.layers.conv2d({
        filters: 16, kernelSize: 3, padding: "same",
        activation: "relu", kernelInitializer: init(),
    }));
    model.add(tf.layers.maxPooling2d({ poolSize: 2 }));
    model.add(tf.layers.conv2d({
        filters: 32, kernelSize: 3, padding: "same",
        activation: "relu", kernelInitializer: init(),
    }));
    model.add(tf.layers.globalAveragePooling2d({}));
    model.add(tf.layers.dense({
        units: 10, activation: "linear", kernelInitializer: init(),
    }));
    return model;
}

export async function saveModel(model: tf.LayersModel, dir: string): Promise<void> {
    fs.mkdirSync(dir, { recursive: true });
    await model.save(tf.io.withSaveHandler(async (artifacts) => {
        const { weightData, ...rest } = artifacts;
        fs.writeFileSync(path.join(dir, "model.json"), JSON.stringify({
            modelTopology: rest.modelTopology,
            weightSpecs: rest.weightSpecs,
            format: rest.format,
            generatedBy: rest.generatedBy,
        }));
        const buffers = Array.isArray(weightData) ? weightData : [weightData!];
        fs.writeFileSync(
            path.join(dir, "weights.bin"),
            Buffer.concat(buffers.map((b) => Buffer.from(b as ArrayBuffer))),
        );
        return { modelArtifactsInfo: { dateSaved: new Date(), modelTopologyType: "JSON" } };
    }));
}

export async function loadModel(dir: string): Promise<tf.LayersModel> {
    const meta = JSON.parse(fs.readFileSync(path.join(dir, "model.json"), "utf8"));
    const weightData = fs.readFileSync(path.join(dir, "weights.bin"));
    return tf.loadLayersModel(tf.io.fromMemory({
        modelTopology: meta.modelTopology,
        weightSpecs: meta.weightSpecs,
        weightData: weightData.buffer.slice(
            weightData.byteOffset, weightData.byteOffset + weightData.byteLength),
    }));
}

/**
 * Verify GAP-then-linear tail and return the model with the final-conv
 * activations exposed. Throws on any other head: without this structure
 * the class-map decomposition of the logits does not hold and every
 * downstream map would be silently wrong.
 */
export function hookFinalConv(model: tf.LayersModel): HookedModel {
    const layers = model.layers;
    if (layers.length < 3) throw new Error("model too shallow for a GAP head");
    const dense = layers[layers.length - 1];
    const gap = layers[layers.length - 2];
    if (gap.getClassName() !== "GlobalAveragePooling2D") {
        throw new Error(
            `refusing export: layer before the classifier is ${gap.getClassName()}, ` +
            "need GlobalAveragePooling2D");
    }
    if (dense.getClassName() !== "Dense") {
        throw new Error(`refusing export: head is ${dense.getClassName()}, need a single Dense`);
    }
    const activation = (dense.getConfig() as { activation?: string }).activation;
    if (activation !== "linear") {
        throw new Error(
            `refusing export: head activation ${activation}; logits require linear`);
    }
    const hooked = gap.input as tf.SymbolicTensor;
    if (Array.isArray(hooked) || hooked.shape.length !== 4) {
        throw new Error("refusing export: hooked layer output is not rank-4");
    }
    const extractor = tf.model({
        inputs: model.inputs,
        outputs: [hooked, model.outputs[0]],
    });
    const [, h, w, k] = hooked.shape;
    const units = (dense.getConfig() as { units: number }).units;
    return {
        model,
        extractor,
        gridShape: [h!, w!],
        numFeatures: k!,
        numClasses: units,
    };
}

/** Head arrays in the interchange convention: sum-pool space, (M,K) + (M,). */
export function exportHead(hooked: HookedModel): { weights: Float32Array; bias: Float32Array } {
    const dense = hooked.model.layers[hooked.model.layers.length - 1];
    const [kernel, bias] = dense.getWeights(); // kernel (K,M), bias (M,)
    const cells = hooked.gridShape[0] * hooked.gridShape[1];
    const scaled = tf.tidy(() => kernel.transpose().div(tf.scalar(cells)));
    const weights = scaled.dataSync() as Float32Array;
    scaled.dispose();
    return { weights, bias: bias.dataSync() as Float32Array };
}
