#!/usr/bin/env node
/**
 * Weight exporter CLI.
 *
 *   export --src <weights.safetensors> --backbone <vit-b-16|vit-b-8|resnet50> --out <file.ahiqw1>
 *   verify --out <file.ahiqw1> --src <weights.safetensors>
 *
 * Both accept --manifest to point at a non-default load-list JSON.
 * Exit codes: 0 success, 1 failed verification or I/O error, 2 usage error.
 */

import { exportBackbone, verifyExport } from './convert.js';
import { BACKBONES, type Backbone } from './namemap.js';

function parseFlags(argv: string[]): Map<string, string> {
  const flags = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    const key = argv[i];
    const value = argv[i + 1];
    if (!key.startsWith('--') || value === undefined) {
      throw new UsageError(`expected --flag value pairs, got ${argv.slice(i).join(' ')}`);
    }
    flags.set(key.slice(2), value);
  }
  return flags;
}

class UsageError extends Error {}

function required(flags: Map<string, string>, name: string): string {
  const value = flags.get(name);
  if (value === undefined) throw new UsageError(`missing required flag --${name}`);
  return value;
}

async function main(argv: string[]): Promise<number> {
  const [command, ...rest] = argv;
  try {
    if (command === 'export') {
      const flags = parseFlags(rest);
      const backbone = required(flags, 'backbone');
      if (!BACKBONES.includes(backbone as Backbone)) {
        throw new UsageError(`unknown backbone ${backbone}; choose from ${BACKBONES.join(', ')}`);
      }
      const result = await exportBackbone(
        required(flags, 'src'),
        backbone as Backbone,
        required(flags, 'out'),
        flags.get('manifest'),
      );
      console.log(`wrote ${result.tensorCount} tensors (${result.byteLength} bytes)`);
      return 0;
    }
    if (command === 'verify') {
      const flags = parseFlags(rest);
      const result = await verifyExport(
        required(flags, 'out'),
        required(flags, 'src'),
        flags.get('manifest'),
      );
      for (const row of result.rows) {
        console.log(`${row.name} max_abs_diff=${row.maxAbsDiff}`);
      }
      for (const name of result.missing) console.error(`missing from output: ${name}`);
      for (const name of result.unexpected) console.error(`unexpected in output: ${name}`);
      if (!result.clean) {
        console.error('verification FAILED');
        return 1;
      }
      console.log(`verification OK (${result.backbone}, ${result.rows.length} tensors)`);
      return 0;
    }
    throw new UsageError(`unknown command ${command ?? '(none)'}; use export or verify`);
  } catch (err) {
    if (err instanceof UsageError) {
      console.error(`usage error: ${err.message}`);
      return 2;
    }
    console.error(`error: ${err instanceof Error ? err.message : String(err)}`);
    return 1;
  }
}

process.exitCode = await main(process.argv.slice(2));
