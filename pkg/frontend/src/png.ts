/**
 * Minimal indexed-PNG codec for class-label masks.
 *
 * Encodes 8-bit palette PNGs (color type 3) with filter 0 and uncompressed
 * ("stored") zlib blocks, so the output is canonical: encoding the result of
 * a decode reproduces the original bytes exactly. The decoder accepts only
 * what the encoder emits (plus any palette), which is all the studio needs —
 * generated result images are rendered by the browser, never parsed here.
 */

const PNG_SIGNATURE = [0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a];

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) {
      c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    }
    table[n] = c >>> 0;
  }
  return table;
})();

function crc32(...parts: Uint8Array[]): number {
  let c = 0xffffffff;
  for (const part of parts) {
    for (let i = 0; i < part.length; i++) {
      c = CRC_TABLE[(c ^ part[i]) & 0xff] ^ (c >>> 8);
    }
  }
  return (c ^ 0xffffffff) >>> 0;
}

function adler32(data: Uint8Array): number {
  let a = 1;
  let b = 0;
  for (let i = 0; i < data.length; i++) {
    a = (a + data[i]) % 65521;
    b = (b + a) % 65521;
  }
  return ((b << 16) | a) >>> 0;
}

function u32be(value: number): Uint8Array {
  return new Uint8Array([(value >>> 24) & 0xff, (value >>> 16) & 0xff, (value >>> 8) & 0xff, value & 0xff]);
}

function ascii(s: string): Uint8Array {
  return new Uint8Array([...s].map((ch) => ch.charCodeAt(0)));
}

function concat(parts: Uint8Array[]): Uint8Array {
  const total = parts.reduce((n, p) => n + p.length, 0);
  const out = new Uint8Array(total);
  let off = 0;
  for (const p of parts) {
    out.set(p, off);
    off += p.length;
  }
  return out;
}

function chunk(type: string, data: Uint8Array): Uint8Array {
  const typeBytes = ascii(type);
  return concat([u32be(data.length), typeBytes, data, u32be(crc32(typeBytes, data))]);
}

/** zlib stream made of stored (uncompressed) deflate blocks. */
function zlibStored(raw: Uint8Array): Uint8Array {
  const parts: Uint8Array[] = [new Uint8Array([0x78, 0x01])];
  const blockSize = 65535;
  for (let off = 0; off < raw.length || off === 0; off += blockSize) {
    const slice = raw.subarray(off, Math.min(off + blockSize, raw.length));
    const final = off + blockSize >= raw.length ? 1 : 0;
    const len = slice.length;
    const header = new Uint8Array([final, len & 0xff, (len >>> 8) & 0xff, ~len & 0xff, (~len >>> 8) & 0xff]);
    parts.push(header, slice);
    if (raw.length === 0) break;
  }
  parts.push(u32be(adler32(raw)));
  return concat(parts);
}

function inflateStored(stream: Uint8Array): Uint8Array {
  if (stream.length < 6) throw new Error("zlib stream truncated");
  if ((stream[0] & 0x0f) !== 8) throw new Error("not a deflate zlib stream");
  const parts: Uint8Array[] = [];
  let off = 2;
  for (;;) {
    if (off >= stream.length - 4) throw new Error("deflate data truncated");
    const header = stream[off];
    if ((header & 0x06) !== 0) {
      throw new Error("unsupported deflate block type (only stored blocks are produced by this codec)");
    }
    const len = stream[off + 1] | (stream[off + 2] << 8);
    const nlen = stream[off + 3] | (stream[off + 4] << 8);
    if ((len ^ nlen) !== 0xffff) throw new Error("stored block length check failed");
    parts.push(stream.subarray(off + 5, off + 5 + len));
    off += 5 + len;
    if (header & 1) break;
  }
  const raw = concat(parts);
  const view = new DataView(stream.buffer, stream.byteOffset + off, 4);
  if (view.getUint32(0) !== adler32(raw)) throw new Error("zlib checksum mismatch");
  return raw;
}

export interface IndexedPng {
  width: number;
  height: number;
  /** Class indices, row-major, one byte per pixel. */
  pixels: Uint8Array;
  /** RGB triples, 3 bytes per palette entry. */
  palette: Uint8Array;
}

export function encodeIndexedPng(image: IndexedPng): Uint8Array {
  const { width, height, pixels, palette } = image;
  if (pixels.length !== width * height) {
    throw new Error(`pixel buffer length ${pixels.length} != ${width}x${height}`);
  }
  if (palette.length === 0 || palette.length % 3 !== 0) {
    throw new Error("palette must be non-empty RGB triples");
  }
  const raw = new Uint8Array(height * (width + 1));
  for (let y = 0; y < height; y++) {
    raw[y * (width + 1)] = 0; // filter type 0 per scanline
    raw.set(pixels.subarray(y * width, (y + 1) * width), y * (width + 1) + 1);
  }
  const ihdr = concat([u32be(width), u32be(height), new Uint8Array([8, 3, 0, 0, 0])]);
  return concat([
    new Uint8Array(PNG_SIGNATURE),
    chunk("IHDR", ihdr),
    chunk("PLTE", palette),
    chunk("IDAT", zlibStored(raw)),
    chunk("IEND", new Uint8Array(0)),
  ]);
}

export function decodeIndexedPng(bytes: Uint8Array): IndexedPng {
  for (let i = 0; i < 8; i++) {
    if (bytes[i] !== PNG_SIGNATURE[i]) throw new Error("not a PNG file");
  }
  let width = 0;
  let height = 0;
  let palette = new Uint8Array(0);
  const idatParts: Uint8Array[] = [];
  let off = 8;
  let sawIhdr = false;
  while (off + 8 <= bytes.length) {
    const view = new DataView(bytes.buffer, bytes.byteOffset + off);
    const length = view.getUint32(0);
    const type = String.fromCharCode(bytes[off + 4], bytes[off + 5], bytes[off + 6], bytes[off + 7]);
    const data = bytes.subarray(off + 8, off + 8 + length);
    if (type === "IHDR") {
      const h = new DataView(data.buffer, data.byteOffset);
      width = h.getUint32(0);
      height = h.getUint32(4);
      const [bitDepth, colorType, , , interlace] = [data[8], data[9], data[10], data[11], data[12]];
      if (bitDepth !== 8 || colorType !== 3 || interlace !== 0) {
        throw new Error(`unsupported PNG format (need 8-bit indexed, got depth=${bitDepth} color=${colorType})`);
      }
      sawIhdr = true;
    } else if (type === "PLTE") {
      palette = new Uint8Array(data);
    } else if (type === "IDAT") {
      idatParts.push(data);
    } else if (type === "IEND") {
      break;
    }
    off += 12 + length;
  }
  if (!sawIhdr) throw new Error("missing IHDR chunk");
  const raw = inflateStored(concat(idatParts));
  if (raw.length !== height * (width + 1)) throw new Error("scanline data has unexpected length");
  const pixels = new Uint8Array(width * height);
  for (let y = 0; y < height; y++) {
    if (raw[y * (width + 1)] !== 0) throw new Error("unsupported scanline filter (this codec writes filter 0)");
    pixels.set(raw.subarray(y * (width + 1) + 1, (y + 1) * (width + 1)), y * width);
  }
  return { width, height, pixels, palette };
}

/** Default display palette: background black, then distinct class colors. */
export function defaultPalette(numClasses: number): Uint8Array {
  const colors = [
    [0, 0, 0],
    [220, 60, 60],
    [70, 90, 220],
    [70, 200, 90],
    [230, 200, 70],
    [180, 80, 200],
    [80, 200, 210],
    [240, 140, 60],
  ];
  const out = new Uint8Array(Math.max(numClasses, 1) * 3);
  for (let i = 0; i < Math.max(numClasses, 1); i++) {
    const c = colors[i % colors.length];
    out.set(c, i * 3);
  }
  return out;
}
