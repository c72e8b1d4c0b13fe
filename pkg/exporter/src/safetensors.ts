/**
 * Minimal safetensors container support: a u64-LE header length, a JSON
 * header mapping tensor names to { dtype, shape, data_offsets }, then the
 * raw little-endian payload.  Only F32/F64 tensors are converted; anything
 * else surfaces as an error when actually requested.
 */

import { readFile } from 'fs/promises';

export interface TensorSlot {
  dtype: string;
  shape: number[];
  begin: number;
  end: number;
}

export class SafetensorsFile {
  constructor(
    private readonly payload: Buffer,
    readonly slots: Map<string, TensorSlot>,
  ) {}

  names(): string[] {
    return [...this.slots.keys()];
  }

  has(name: string): boolean {
    return this.slots.has(name);
  }

  shape(name: string): number[] {
    const slot = this.slots.get(name);
    if (!slot) throw new Error(`tensor ${name} not present in source file`);
    return slot.shape;
  }

  /** Tensor data as float32, casting from float64 when needed. */
  readF32(name: string): Float32Array {
    const slot = this.slots.get(name);
    if (!slot) throw new Error(`tensor ${name} not present in source file`);
    const bytes = this.payload.subarray(slot.begin, slot.end);
    const count = slot.shape.reduce((a, b) => a * b, 1);
    if (slot.dtype === 'F32') {
      if (bytes.length !== count * 4) {
        throw new Error(`tensor ${name}: payload is ${bytes.length} bytes, expected ${count * 4}`);
      }
      return new Float32Array(bytes.buffer.slice(bytes.byteOffset, bytes.byteOffset + bytes.length));
    }
    if (slot.dtype === 'F64') {
      const wide = new Float64Array(bytes.buffer.slice(bytes.byteOffset, bytes.byteOffset + bytes.length));
      return Float32Array.from(wide);
    }
    throw new Error(`tensor ${name}: unsupported dtype ${slot.dtype} (need F32 or F64)`);
  }
}

export function parseSafetensors(blob: Buffer): SafetensorsFile {
  if (blob.length < 8) throw new Error('safetensors: file shorter than its header length field');
  const headerLen = Number(blob.readBigUInt64LE(0));
  if (8 + headerLen > blob.length) {
    throw new Error(`safetensors: header length ${headerLen} exceeds file size`);
  }
  const header = JSON.parse(blob.subarray(8, 8 + headerLen).toString('utf-8')) as Record<
    string,
    { dtype: string; shape: number[]; data_offsets: [number, number] }
  >;
  const payload = blob.subarray(8 + headerLen);
  const slots = new Map<string, TensorSlot>();
  for (const [name, meta] of Object.entries(header)) {
    if (name === '__metadata__') continue;
    slots.set(name, {
      dtype: meta.dtype,
      shape: meta.shape,
      begin: meta.data_offsets[0],
      end: meta.data_offsets[1],
    });
  }
  return new SafetensorsFile(payload, slots);
}

export async function loadSafetensors(path: string): Promise<SafetensorsFile> {
  return parseSafetensors(await readFile(path));
}

/** Serialize float32 tensors into a safetensors blob (used by tests). */
export function serializeSafetensors(tensors: Map<string, { shape: number[]; data: Float32Array }>): Buffer {
  const header: Record<string, { dtype: string; shape: number[]; data_offsets: [number, number] }> = {};
  let offset = 0;
  const chunks: Buffer[] = [];
  for (const [name, t] of tensors) {
    const bytes = Buffer.from(t.data.buffer.slice(t.data.byteOffset, t.data.byteOffset + t.data.byteLength));
    header[name] = { dtype: 'F32', shape: t.shape, data_offsets: [offset, offset + bytes.length] };
    offset += bytes.length;
    chunks.push(bytes);
  }
  const headerJson = Buffer.from(JSON.stringify(header), 'utf-8');
  const lenField = Buffer.alloc(8);
  lenField.writeBigUInt64LE(BigInt(headerJson.length));
  return Buffer.concat([lenField, headerJson, ...chunks]);
}
