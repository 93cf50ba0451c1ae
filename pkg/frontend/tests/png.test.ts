import { describe, expect, it } from "vitest";

import { decodeIndexedPng, defaultPalette, encodeIndexedPng } from "../src/png.js";

function randomImage(width: number, height: number, classes: number, seed = 1) {
  let state = seed;
  const rand = () => {
    state = (state * 1103515245 + 12345) & 0x7fffffff;
    return state / 0x7fffffff;
  };
  const pixels = new Uint8Array(width * height);
  for (let i = 0; i < pixels.length; i++) pixels[i] = Math.floor(rand() * classes);
  return { width, height, pixels, palette: defaultPalette(classes) };
}

describe("indexed png codec", () => {
  it("round-trips pixels and palette losslessly", () => {
    const image = randomImage(32, 32, 4);
    const decoded = decodeIndexedPng(encodeIndexedPng(image));
    expect(decoded.width).toBe(32);
    expect(decoded.height).toBe(32);
    expect([...decoded.pixels]).toEqual([...image.pixels]);
    expect([...decoded.palette]).toEqual([...image.palette]);
  });

  it("re-encoding a decode reproduces the bytes exactly", () => {
    const bytes = encodeIndexedPng(randomImage(16, 16, 3, 7));
    const again = encodeIndexedPng(decodeIndexedPng(bytes));
    expect([...again]).toEqual([...bytes]);
  });

  it("handles non-square and single-pixel images", () => {
    for (const [w, h] of [
      [1, 1],
      [5, 3],
      [64, 2],
    ] as const) {
      const image = randomImage(w, h, 5, w * 100 + h);
      const decoded = decodeIndexedPng(encodeIndexedPng(image));
      expect(decoded.width).toBe(w);
      expect(decoded.height).toBe(h);
      expect([...decoded.pixels]).toEqual([...image.pixels]);
    }
  });

  it("starts with the PNG signature", () => {
    const bytes = encodeIndexedPng(randomImage(4, 4, 2));
    expect([...bytes.subarray(0, 8)]).toEqual([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]);
  });

  it("rejects non-PNG data", () => {
    expect(() => decodeIndexedPng(new Uint8Array([1, 2, 3, 4, 5, 6, 7, 8]))).toThrow(/not a PNG/);
  });

  it("rejects mismatched buffer sizes", () => {
    expect(() =>
      encodeIndexedPng({ width: 4, height: 4, pixels: new Uint8Array(3), palette: defaultPalette(2) }),
    ).toThrow(/pixel buffer/);
  });

  it("spans multiple stored blocks for large images", () => {
    const image = randomImage(300, 300, 6, 3); // raw stream > 65535 bytes
    const decoded = decodeIndexedPng(encodeIndexedPng(image));
    expect([...decoded.pixels]).toEqual([...image.pixels]);
  });
});
