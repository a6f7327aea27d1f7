/**
 * Backend selection: the WASM kernels are an order of magnitude faster
 * than the plain-JS CPU backend for conv workloads. Single-threaded so
 * exports are reproducible byte for byte.
 */

import * as path from "node:path";
import { fileURLToPath } from "node:url";
import * as tf from "@tensorflow/tfjs";
import { setThreadsCount, setWasmPaths } from "@tensorflow/tfjs-backend-wasm";

export async function initBackend(): Promise<string> {
    try {
        const here = path.dirname(fileURLToPath(import.meta.url));
        setWasmPaths(path.join(here, "../node_modules/@tensorflow/tfjs-backend-wasm/dist/"));
        setThreadsCount(1);
        if (await tf.setBackend("wasm")) {
            await tf.ready();
            return tf.getBackend();
        }
    } catch {
        // fall through to the default backend
    }
    await tf.setBackend("cpu");
    await tf.ready();
    return tf.getBackend();
}
