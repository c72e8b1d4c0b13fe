/**
 * Export and verification: map source tensors onto the scoring network's
 * backbone names, validate shapes against the shipped load list, write the
 * AHIQW1 file, and re-read it for elementwise comparison with the source.
 */

import { readFile, writeFile } from 'fs/promises';

import { parseAhiqw1, serializeAhiqw1, type NamedTensor } from './ahiqw1.js';
import { loadManifest, nameMap, type Backbone, type LoadList } from './namemap.js';
import { loadSafetensors, type SafetensorsFile } from './safetensors.js';

export interface ExportResult {
  tensorCount: number;
  byteLength: number;
}

function sameShape(a: number[], b: number[]): boolean {
  return a.length === b.length && a.every((v, i) => v === b[i]);
}

export function collectTensors(
  source: SafetensorsFile,
  backbone: Backbone,
  manifest: LoadList,
): Map<string, NamedTensor> {
  const expected = manifest[backbone];
  if (!expected) throw new Error(`manifest lacks backbone ${backbone}`);
  const missing: string[] = [];
  const mismatched: string[] = [];
  const out = new Map<string, NamedTensor>();
  for (const { source: src, target } of nameMap(backbone)) {
    if (!source.has(src)) {
      missing.push(src);
      continue;
    }
    const shape = source.shape(src);
    const want = expected[target];
    if (!want || !sameShape(shape, want)) {
      mismatched.push(`${src} -> ${target}: source [${shape}] vs required [${want ?? '?'}]`);
      continue;
    }
    out.set(target, { shape, data: source.readF32(src) });
  }
  if (missing.length > 0) {
    throw new Error(`source is missing required parameters: ${missing.join(', ')}`);
  }
  if (mismatched.length > 0) {
    throw new Error(`shape mismatches (wrong backbone flag?): ${mismatched.join('; ')}`);
  }
  const unexported = Object.keys(expected).filter((name) => !out.has(name));
  if (unexported.length > 0) {
    throw new Error(`name map does not cover the load list: ${unexported.join(', ')}`);
  }
  return out;
}

export async function exportBackbone(
  sourcePath: string,
  backbone: Backbone,
  outPath: string,
  manifestPath?: string,
): Promise<ExportResult> {
  const manifest = await loadManifest(manifestPath);
  const source = await loadSafetensors(sourcePath);
  const tensors = collectTensors(source, backbone, manifest);
  const blob = serializeAhiqw1(tensors);
  await writeFile(outPath, blob);
  return { tensorCount: tensors.size, byteLength: blob.length };
}

export interface VerifyRow {
  name: string;
  maxAbsDiff: number;
}

export interface VerifyResult {
  backbone: Backbone;
  rows: VerifyRow[];
  missing: string[];
  unexpected: string[];
  clean: boolean;
}

export function detectBackbone(
  tensors: Map<string, { shape: number[] }>,
  manifest: LoadList,
): Backbone {
  let best: Backbone | null = null;
  let bestScore = 0;
  for (const backbone of Object.keys(manifest) as Backbone[]) {
    const expected = Object.entries(manifest[backbone]);
    let score = 0;
    for (const [name, shape] of expected) {
      const got = tensors.get(name);
      if (got !== undefined && sameShape(got.shape, shape)) score += 1;
    }
    if (score === expected.length && expected.length === tensors.size) {
      return backbone; // exact match
    }
    if (score > bestScore) {
      bestScore = score;
      best = backbone;
    }
  }
  // a partial match lets verify report exactly which tensors are missing
  if (best !== null && bestScore > 0) return best;
  throw new Error('tensor names/shapes do not match any backbone load list');
}

export async function verifyExport(
  outPath: string,
  sourcePath: string,
  manifestPath?: string,
): Promise<VerifyResult> {
  const manifest = await loadManifest(manifestPath);
  const exported = parseAhiqw1(await readFile(outPath));
  const backbone = detectBackbone(exported, manifest);
  const source = await loadSafetensorsChecked(sourcePath);
  const reverse = new Map(nameMap(backbone).map((e) => [e.target, e.source]));
  const rows: VerifyRow[] = [];
  const missing: string[] = [];
  for (const [target, src] of reverse) {
    const got = exported.get(target);
    if (!got) {
      missing.push(target);
      continue;
    }
    const want = source.readF32(src);
    let maxDiff = want.length === got.data.length ? 0 : Infinity;
    if (want.length === got.data.length) {
      for (let i = 0; i < want.length; i++) {
        const diff = Math.abs(want[i] - got.data[i]);
        if (diff > maxDiff) maxDiff = diff;
      }
    }
    rows.push({ name: target, maxAbsDiff: maxDiff });
  }
  const unexpected = [...exported.keys()].filter((name) => !reverse.has(name));
  const clean =
    missing.length === 0 && unexpected.length === 0 && rows.every((r) => r.maxAbsDiff === 0);
  return { backbone, rows, missing, unexpected, clean };
}

async function loadSafetensorsChecked(path: string): Promise<SafetensorsFile> {
  return loadSafetensors(path);
}
