/** Minimal PNG decoder for server artifacts.
 *
 * Browsers decode the panorama natively, but 16-bit grayscale label maps
 * lose their low byte when drawn through a canvas, so instance IDs must be
 * read straight from the PNG stream. Supports non-interlaced gray, gray+alpha,
 * RGB, and RGBA at 8- or 16-bit depth; inflate comes from the platform's
 * DecompressionStream.
 */

export interface DecodedPng {
  width: number;
  height: number;
  bitDepth: 8 | 16;
  channels: number;
  /** Interleaved samples, row-major; Uint16Array when bitDepth is 16. */
  samples: Uint8Array | Uint16Array;
}

const SIGNATURE = [137, 80, 78, 71, 13, 10, 26, 10];

const CHANNELS: Record<number, number> = { 0: 1, 2: 3, 4: 2, 6: 4 };

async function inflate(data: Uint8Array): Promise<Uint8Array> {
  const stream = new Blob([data as BlobPart])
    .stream()
    .pipeThrough(new DecompressionStream("deflate"));
  return new Uint8Array(await new Response(stream).arrayBuffer());
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

function unfilter(raw: Uint8Array, height: number, rowBytes: number, bpp: number): Uint8Array {
  const out = new Uint8Array(height * rowBytes);
  for (let row = 0; row < height; row++) {
    const filter = raw[row * (rowBytes + 1)];
    const src = row * (rowBytes + 1) + 1;
    const dst = row * rowBytes;
    const prev = dst - rowBytes;
    for (let i = 0; i < rowBytes; i++) {
      const x = raw[src + i];
      const left = i >= bpp ? out[dst + i - bpp] : 0;
      const up = row > 0 ? out[prev + i] : 0;
      const upLeft = row > 0 && i >= bpp ? out[prev + i - bpp] : 0;
      let value: number;
      switch (filter) {
        case 0:
          value = x;
          break;
        case 1:
          value = x + left;
          break;
        case 2:
          value = x + up;
          break;
        case 3:
          value = x + ((left + up) >> 1);
          break;
        case 4:
          value = x + paeth(left, up, upLeft);
          break;
        default:
          throw new Error(`unknown PNG filter type ${filter}`);
      }
      out[dst + i] = value & 0xff;
    }
  }
  return out;
}

export async function decodePng(bytes: Uint8Array): Promise<DecodedPng> {
  if (bytes.length < 8 || SIGNATURE.some((b, i) => bytes[i] !== b)) {
    throw new Error("not a PNG file");
  }
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  let width = 0;
  let height = 0;
  let bitDepth = 0;
  let colorType = 0;
  const idat: Uint8Array[] = [];
  let offset = 8;
  while (offset + 8 <= bytes.length) {
    const length = view.getUint32(offset);
    const type = String.fromCharCode(...bytes.subarray(offset + 4, offset + 8));
    const data = bytes.subarray(offset + 8, offset + 8 + length);
    if (type === "IHDR") {
      width = view.getUint32(offset + 8);
      height = view.getUint32(offset + 12);
      bitDepth = data[8];
      colorType = data[9];
      if (data[12] !== 0) throw new Error("interlaced PNG not supported");
      if (bitDepth !== 8 && bitDepth !== 16) {
        throw new Error(`unsupported PNG bit depth ${bitDepth}`);
      }
      if (!(colorType in CHANNELS)) {
        throw new Error(`unsupported PNG color type ${colorType}`);
      }
    } else if (type === "IDAT") {
      idat.push(data);
    } else if (type === "IEND") {
      break;
    }
    offset += 12 + length; // length + type + data + crc
  }
  if (width === 0 || height === 0 || idat.length === 0) {
    throw new Error("PNG missing IHDR or IDAT");
  }

  const joined = new Uint8Array(idat.reduce((n, c) => n + c.length, 0));
  let at = 0;
  for (const chunk of idat) {
    joined.set(chunk, at);
    at += chunk.length;
  }
  const channels = CHANNELS[colorType];
  const sampleBytes = bitDepth / 8;
  const rowBytes = width * channels * sampleBytes;
  const raw = await inflate(joined);
  if (raw.length < height * (rowBytes + 1)) {
    throw new Error("PNG pixel data truncated");
  }
  const recon = unfilter(raw, height, rowBytes, channels * sampleBytes);

  if (bitDepth === 8) {
    return { width, height, bitDepth: 8, channels, samples: recon };
  }
  const samples = new Uint16Array(width * height * channels);
  for (let i = 0; i < samples.length; i++) {
    samples[i] = (recon[2 * i] << 8) | recon[2 * i + 1]; // network byte order
  }
  return { width, height, bitDepth: 16, channels, samples };
}

export interface LabelImage {
  width: number;
  height: number;
  /** Instance ID per pixel, 0 = background. */
  ids: Uint32Array;
}

/** Decode a label-map PNG, keeping the first channel as the instance ID. */
export async function decodeLabelMap(bytes: Uint8Array): Promise<LabelImage> {
  const png = await decodePng(bytes);
  const ids = new Uint32Array(png.width * png.height);
  const stride = png.channels;
  for (let i = 0; i < ids.length; i++) {
    ids[i] = png.samples[i * stride];
  }
  return { width: png.width, height: png.height, ids };
}

/** Distinct non-zero instance IDs in ascending order. */
export function instanceIds(labels: LabelImage): number[] {
  const seen = new Set<number>();
  for (const id of labels.ids) {
    if (id !== 0) seen.add(id);
  }
  return [...seen].sort((a, b) => a - b);
}
