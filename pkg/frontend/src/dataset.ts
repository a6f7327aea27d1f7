/**
 * Reader for the localization pipeline's dataset manifests: sample entries
 * pointing into per-sample or packed NPY image files.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import { NpyArray, readNpy } from "./npy.js";

export interface SampleEntry {
    id: string;
    features: string;
    index?: number;
    image_size: [number, number];
    labels: number[];
    gt_boxes: number[][];
}

export interface DatasetManifest {
    root: string;
    samples: SampleEntry[];
    num_classes: number;
}

export function readManifest(manifestPath: string): DatasetManifest {
    const doc = JSON.parse(fs.readFileSync(manifestPath, "utf8"));
    if (!Array.isArray(doc.samples) || typeof doc.num_classes !== "number") {
        throw new Error(`${manifestPath}: not a dataset manifest`);
    }
    return {
        root: path.dirname(manifestPath),
        samples: doc.samples as SampleEntry[],
        num_classes: doc.num_classes,
    };
}

export class ImageLoader {
    private cache = new Map<string, NpyArray>();

    constructor(private readonly manifest: DatasetManifest) {}

    /** One sample's image stack as (C, H, W) values. */
    load(entry: SampleEntry): { shape: number[]; data: Float64Array } {
        const file = path.join(this.manifest.root, entry.features);
        let arr = this.cache.get(file);
        if (!arr) {
            arr = readNpy(file);
            this.cache.set(file, arr);
        }
        if (arr.shape.length === 3) {
            return { shape: arr.shape, data: arr.data };
        }
        if (arr.shape.length === 4) {
            if (entry.index === undefined) {
                throw new Error(`sample ${entry.id}: packed file needs an index`);
            }
            const [, c, h, w] = arr.shape;
            const size = c * h * w;
            const start = entry.index * size;
            return {
                shape: [c, h, w],
                data: arr.data.slice(start, start + size),
            };
        }
        throw new Error(`sample ${entry.id}: image rank ${arr.shape.length}`);
    }
}

/** (C,H,W) -> flat HWC order for building tfjs tensors. */
export function chwToHwc(shape: number[], data: Float64Array): Float32Array {
    const [c, h, w] = shape;
    const out = new Float32Array(c * h * w);
    for (let y = 0; y < h; y++) {
        for (let x = 0; x < w; x++) {
            for (let ch = 0; ch < c; ch++) {
                out[(y * w + x) * c + ch] = data[ch * h * w + y * w + x];
            }
        }
    }
    return out;
}
