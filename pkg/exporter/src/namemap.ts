/**
 * Source-name mapping: torchvision state-dict keys -> AHIQW1 tensor names.
 *
 * Covers exactly the backbone tensors the scoring network loads at full
 * size: ViT-B embeddings plus encoder blocks 0..4, and the ResNet-50 stem
 * plus all of stage 1.  Expected shapes come from the load-list manifest
 * shipped with the scoring package.
 */

import { readFile } from 'fs/promises';
import { dirname, join } from 'path';
import { fileURLToPath } from 'url';

export type Backbone = 'vit-b-16' | 'vit-b-8' | 'resnet50';

export const BACKBONES: Backbone[] = ['vit-b-16', 'vit-b-8', 'resnet50'];

export interface MapEntry {
  source: string;
  target: string;
}

export function nameMap(backbone: Backbone): MapEntry[] {
  if (backbone === 'resnet50') {
    const entries: MapEntry[] = [
      { source: 'conv1.weight', target: 'cnn.stem.conv.weight' },
      ...bnEntries('bn1', 'cnn.stem.bn'),
    ];
    for (let i = 0; i < 3; i++) {
      for (const conv of [1, 2, 3]) {
        entries.push({
          source: `layer1.${i}.conv${conv}.weight`,
          target: `cnn.blocks.${i}.conv${conv}.weight`,
        });
        entries.push(...bnEntries(`layer1.${i}.bn${conv}`, `cnn.blocks.${i}.bn${conv}`));
      }
      if (i === 0) {
        entries.push({
          source: 'layer1.0.downsample.0.weight',
          target: 'cnn.blocks.0.down.conv.weight',
        });
        entries.push(...bnEntries('layer1.0.downsample.1', 'cnn.blocks.0.down.bn'));
      }
    }
    return entries;
  }
  // both ViT variants share the torchvision VisionTransformer naming
  const entries: MapEntry[] = [
    { source: 'class_token', target: 'vit.cls_token' },
    { source: 'conv_proj.weight', target: 'vit.patch_proj.weight' },
    { source: 'conv_proj.bias', target: 'vit.patch_proj.bias' },
    { source: 'encoder.pos_embedding', target: 'vit.pos_embed' },
  ];
  for (let i = 0; i < 5; i++) {
    const src = `encoder.layers.encoder_layer_${i}`;
    const dst = `vit.blocks.${i}`;
    entries.push(
      { source: `${src}.ln_1.weight`, target: `${dst}.ln1.weight` },
      { source: `${src}.ln_1.bias`, target: `${dst}.ln1.bias` },
      { source: `${src}.self_attention.in_proj_weight`, target: `${dst}.qkv.weight` },
      { source: `${src}.self_attention.in_proj_bias`, target: `${dst}.qkv.bias` },
      { source: `${src}.self_attention.out_proj.weight`, target: `${dst}.out.weight` },
      { source: `${src}.self_attention.out_proj.bias`, target: `${dst}.out.bias` },
      { source: `${src}.ln_2.weight`, target: `${dst}.ln2.weight` },
      { source: `${src}.ln_2.bias`, target: `${dst}.ln2.bias` },
      { source: `${src}.mlp.0.weight`, target: `${dst}.fc1.weight` },
      { source: `${src}.mlp.0.bias`, target: `${dst}.fc1.bias` },
      { source: `${src}.mlp.3.weight`, target: `${dst}.fc2.weight` },
      { source: `${src}.mlp.3.bias`, target: `${dst}.fc2.bias` },
    );
  }
  return entries;
}

function bnEntries(source: string, target: string): MapEntry[] {
  return ['weight', 'bias', 'running_mean', 'running_var'].map((field) => ({
    source: `${source}.${field}`,
    target: `${target}.${field}`,
  }));
}

export type LoadList = Record<Backbone, Record<string, number[]>>;

const DEFAULT_MANIFEST = join(
  dirname(fileURLToPath(import.meta.url)),
  '..',
  '..',
  'data',
  'full_backbone_load_list.json',
);

export async function loadManifest(path?: string): Promise<LoadList> {
  return JSON.parse(await readFile(path ?? DEFAULT_MANIFEST, 'utf-8')) as LoadList;
}
