import assert from 'node:assert/strict';
import { test } from 'node:test';
import { mkdtemp, readFile, writeFile } from 'fs/promises';
import { tmpdir } from 'os';
import { join } from 'path';

import { collectTensors, detectBackbone, exportBackbone, verifyExport } from '../src/convert.js';
import { loadManifest, nameMap, BACKBONES, type Backbone } from '../src/namemap.js';
import { parseSafetensors, serializeSafetensors } from '../src/safetensors.js';

let counter = 1;

/** Synthesize a torchvision-style state dict covering one backbone. */
async function syntheticSource(backbone: Backbone): Promise<Map<string, { shape: number[]; data: Float32Array }>> {
  const manifest = await loadManifest();
  const tensors = new Map<string, { shape: number[]; data: Float32Array }>();
  for (const { source, target } of nameMap(backbone)) {
    const shape = manifest[backbone][target];
    const data = new Float32Array(shape.reduce((a, b) => a * b, 1));
    for (let i = 0; i < data.length; i++) data[i] = Math.fround(Math.sin(counter++) * 3);
    tensors.set(source, { shape, data });
  }
  // distractors that real state dicts carry and the exporter must skip
  tensors.set('bn1.num_batches_tracked', { shape: [], data: new Float32Array([4]) });
  tensors.set('heads.head.weight', { shape: [2, 2], data: new Float32Array(4) });
  return tensors;
}

test('safetensors round trip', async () => {
  const tensors = await syntheticSource('resnet50');
  const file = parseSafetensors(serializeSafetensors(tensors));
  assert.equal(file.names().length, tensors.size);
  const name = 'conv1.weight';
  assert.deepEqual(file.shape(name), [64, 3, 7, 7]);
  assert.deepEqual(Buffer.from(file.readF32(name).buffer), Buffer.from(tensors.get(name)!.data.buffer));
});

for (const backbone of BACKBONES) {
  test(`collect covers the ${backbone} load list exactly`, async () => {
    const manifest = await loadManifest();
    const source = parseSafetensors(serializeSafetensors(await syntheticSource(backbone)));
    const collected = collectTensors(source, backbone, manifest);
    assert.deepEqual(
      [...collected.keys()].sort(),
      Object.keys(manifest[backbone]).sort(),
    );
    assert.equal(detectBackbone(collected, manifest), backbone);
  });
}

test('missing source parameter is named', async () => {
  const manifest = await loadManifest();
  const tensors = await syntheticSource('resnet50');
  tensors.delete('layer1.1.conv2.weight');
  const source = parseSafetensors(serializeSafetensors(tensors));
  assert.throws(
    () => collectTensors(source, 'resnet50', manifest),
    /layer1\.1\.conv2\.weight/,
  );
});

test('wrong backbone flag surfaces shape mismatches', async () => {
  const manifest = await loadManifest();
  const source = parseSafetensors(serializeSafetensors(await syntheticSource('vit-b-16')));
  assert.throws(() => collectTensors(source, 'vit-b-8', manifest), /shape mismatch/i);
});

test('export + verify report zero diff and re-export is byte-identical', async () => {
  const dir = await mkdtemp(join(tmpdir(), 'ahiq-export-'));
  const srcPath = join(dir, 'resnet50.safetensors');
  await writeFile(srcPath, serializeSafetensors(await syntheticSource('resnet50')));
  const outPath = join(dir, 'resnet50.ahiqw1');
  const result = await exportBackbone(srcPath, 'resnet50', outPath);
  assert.equal(result.tensorCount, 55);

  const verdict = await verifyExport(outPath, srcPath);
  assert.equal(verdict.backbone, 'resnet50');
  assert.ok(verdict.clean);
  assert.ok(verdict.rows.every((row) => row.maxAbsDiff === 0));

  const again = join(dir, 'resnet50-again.ahiqw1');
  await exportBackbone(srcPath, 'resnet50', again);
  assert.deepEqual(await readFile(again), await readFile(outPath));
});

test('verify flags a corrupted output', async () => {
  const dir = await mkdtemp(join(tmpdir(), 'ahiq-verify-'));
  const srcPath = join(dir, 'vit.safetensors');
  await writeFile(srcPath, serializeSafetensors(await syntheticSource('vit-b-16')));
  const outPath = join(dir, 'vit.ahiqw1');
  await exportBackbone(srcPath, 'vit-b-16', outPath);
  const blob = Buffer.from(await readFile(outPath));
  // flip one payload bit and fix the trailer so corruption reaches verify
  const { crc32 } = await import('../src/ahiqw1.js');
  blob[5000] ^= 0x01;
  blob.writeUInt32LE(crc32(blob.subarray(0, blob.length - 4)), blob.length - 4);
  await writeFile(outPath, blob);
  const verdict = await verifyExport(outPath, srcPath);
  assert.equal(verdict.clean, false);
  assert.ok(verdict.rows.some((row) => row.maxAbsDiff > 0));
});

test('verify lists tensors missing from the output', async () => {
  const dir = await mkdtemp(join(tmpdir(), 'ahiq-missing-'));
  const srcPath = join(dir, 'resnet50.safetensors');
  await writeFile(srcPath, serializeSafetensors(await syntheticSource('resnet50')));
  const outPath = join(dir, 'resnet50.ahiqw1');
  await exportBackbone(srcPath, 'resnet50', outPath);
  const { parseAhiqw1, serializeAhiqw1 } = await import('../src/ahiqw1.js');
  const tensors = parseAhiqw1(await readFile(outPath));
  tensors.delete('cnn.blocks.1.conv2.weight');
  await writeFile(outPath, serializeAhiqw1(tensors));
  const verdict = await verifyExport(outPath, srcPath);
  assert.equal(verdict.clean, false);
  assert.deepEqual(verdict.missing, ['cnn.blocks.1.conv2.weight']);
});

test('manifest copy matches the scoring package resource', async () => {
  const local = await readFile(new URL('../../data/full_backbone_load_list.json', import.meta.url), 'utf-8');
  const primary = await readFile(
    new URL('../../../src/ahiq/resources/full_backbone_load_list.json', import.meta.url),
    'utf-8',
  );
  assert.equal(local, primary);
});
