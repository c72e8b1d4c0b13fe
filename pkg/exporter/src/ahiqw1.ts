/**
 * AHIQW1 checkpoint container: magic "AHIQW1", u8 version=1, u32-LE tensor
 * count, per tensor { u32 name length, UTF-8 name, u8 dtype tag (0=f32,
 * 1=f64), u32 rank, rank x u64 dims, raw LE data }, closed by a u32 CRC32
 * of all preceding bytes.
 */

const MAGIC = Buffer.from('AHIQW1', 'ascii');
const VERSION = 1;

export interface NamedTensor {
  shape: number[];
  data: Float32Array;
}

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let i = 0; i < 256; i++) {
    let c = i;
    for (let k = 0; k < 8; k++) {
      c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    }
    table[i] = c >>> 0;
  }
  return table;
})();

export function crc32(buf: Buffer): number {
  let c = 0xffffffff;
  for (let i = 0; i < buf.length; i++) {
    c = CRC_TABLE[(c ^ buf[i]) & 0xff] ^ (c >>> 8);
  }
  return (c ^ 0xffffffff) >>> 0;
}

export function serializeAhiqw1(tensors: Map<string, NamedTensor>): Buffer {
  const chunks: Buffer[] = [MAGIC];
  const u8 = Buffer.alloc(1);
  u8.writeUInt8(VERSION);
  chunks.push(Buffer.from(u8));
  const count = Buffer.alloc(4);
  count.writeUInt32LE(tensors.size);
  chunks.push(count);
  for (const [name, tensor] of tensors) {
    const nameBytes = Buffer.from(name, 'utf-8');
    const head = Buffer.alloc(4);
    head.writeUInt32LE(nameBytes.length);
    chunks.push(head, nameBytes);
    const meta = Buffer.alloc(1 + 4 + 8 * tensor.shape.length);
    meta.writeUInt8(0, 0); // f32
    meta.writeUInt32LE(tensor.shape.length, 1);
    tensor.shape.forEach((dim, i) => meta.writeBigUInt64LE(BigInt(dim), 5 + 8 * i));
    chunks.push(meta);
    chunks.push(
      Buffer.from(tensor.data.buffer.slice(tensor.data.byteOffset, tensor.data.byteOffset + tensor.data.byteLength)),
    );
  }
  const body = Buffer.concat(chunks);
  const trailer = Buffer.alloc(4);
  trailer.writeUInt32LE(crc32(body));
  return Buffer.concat([body, trailer]);
}

export function parseAhiqw1(blob: Buffer): Map<string, NamedTensor> {
  let pos = 0;
  const take = (n: number, what: string): Buffer => {
    if (pos + n > blob.length) throw new Error(`truncated while reading ${what} (byte offset ${pos})`);
    const out = blob.subarray(pos, pos + n);
    pos += n;
    return out;
  };
  if (!take(6, 'magic').equals(MAGIC)) throw new Error('bad magic (byte offset 0)');
  const version = take(1, 'version').readUInt8();
  if (version !== VERSION) throw new Error(`unsupported version ${version} (byte offset 6)`);
  const count = take(4, 'count').readUInt32LE();
  const out = new Map<string, NamedTensor>();
  for (let i = 0; i < count; i++) {
    const nameLen = take(4, 'name length').readUInt32LE();
    const name = take(nameLen, 'name').toString('utf-8');
    const tag = take(1, 'dtype tag').readUInt8();
    const rank = take(4, 'rank').readUInt32LE();
    const shape: number[] = [];
    for (let d = 0; d < rank; d++) {
      shape.push(Number(take(8, 'dim').readBigUInt64LE()));
    }
    const countElems = shape.reduce((a, b) => a * b, 1);
    if (tag === 0) {
      const raw = take(countElems * 4, `data of ${name}`);
      out.set(name, {
        shape,
        data: new Float32Array(raw.buffer.slice(raw.byteOffset, raw.byteOffset + raw.length)),
      });
    } else if (tag === 1) {
      const raw = take(countElems * 8, `data of ${name}`);
      const wide = new Float64Array(raw.buffer.slice(raw.byteOffset, raw.byteOffset + raw.length));
      out.set(name, { shape, data: Float32Array.from(wide) });
    } else {
      throw new Error(`unknown dtype tag ${tag} for ${name}`);
    }
  }
  const stored = take(4, 'crc32').readUInt32LE();
  if (pos !== blob.length) throw new Error(`trailing bytes after checksum (byte offset ${pos})`);
  const actual = crc32(blob.subarray(0, blob.length - 4));
  if (stored !== actual) {
    throw new Error(`checksum mismatch: stored 0x${stored.toString(16)}, computed 0x${actual.toString(16)}`);
  }
  return out;
}
