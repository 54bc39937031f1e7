/**
 * LICOEMB1 class-embedding file:
 *   magic "LICOEMB1" (8 ASCII bytes)
 *   u32 LE version = 1
 *   u32 LE num_classes, u32 LE dim
 *   per class: u16 LE name byte-length + UTF-8 name
 *   num_classes x dim float32 LE, row-major
 */

export const MAGIC = Buffer.from("LICOEMB1", "ascii");
export const VERSION = 1;

export function encodeEmbeddingFile(names: string[], rows: Float64Array[], dim: number): Buffer {
  if (names.length !== rows.length) {
    throw new Error(`have ${names.length} names but ${rows.length} rows`);
  }
  const header = Buffer.alloc(12);
  header.writeUInt32LE(VERSION, 0);
  header.writeUInt32LE(names.length, 4);
  header.writeUInt32LE(dim, 8);
  const chunks: Buffer[] = [MAGIC, header];
  for (const name of names) {
    const encoded = Buffer.from(name, "utf-8");
    if (encoded.length > 0xffff) throw new Error(`class name too long: ${name}`);
    const len = Buffer.alloc(2);
    len.writeUInt16LE(encoded.length, 0);
    chunks.push(len, encoded);
  }
  const matrix = Buffer.alloc(4 * names.length * dim);
  rows.forEach((row, i) => {
    if (row.length !== dim) throw new Error(`row ${i} has width ${row.length}, expected ${dim}`);
    row.forEach((value, j) => matrix.writeFloatLE(Math.fround(value), 4 * (i * dim + j)));
  });
  chunks.push(matrix);
  return Buffer.concat(chunks);
}

export interface DecodedEmbeddings {
  names: string[];
  dim: number;
  rows: Float64Array[];
}

/** Strict decoder used by the test suite to validate the grammar byte-for-byte. */
export function decodeEmbeddingFile(blob: Buffer): DecodedEmbeddings {
  if (!blob.subarray(0, 8).equals(MAGIC)) throw new Error("bad magic");
  const version = blob.readUInt32LE(8);
  if (version !== VERSION) throw new Error(`unsupported version ${version}`);
  const numClasses = blob.readUInt32LE(12);
  const dim = blob.readUInt32LE(16);
  let offset = 20;
  const names: string[] = [];
  for (let i = 0; i < numClasses; i++) {
    const len = blob.readUInt16LE(offset);
    offset += 2;
    names.push(blob.subarray(offset, offset + len).toString("utf-8"));
    offset += len;
  }
  const rows: Float64Array[] = [];
  for (let i = 0; i < numClasses; i++) {
    const row = new Float64Array(dim);
    for (let j = 0; j < dim; j++) {
      row[j] = blob.readFloatLE(offset);
      offset += 4;
    }
    rows.push(row);
  }
  if (offset !== blob.length) throw new Error("trailing bytes after matrix");
  return { names, dim, rows };
}
