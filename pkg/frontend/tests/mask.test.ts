import { describe, expect, it } from "vitest";

import { CanvasMask } from "../src/mask.js";
import { decodeIndexedPng } from "../src/png.js";

describe("CanvasMask painting", () => {
  it("paint then undo restores the previous bitmaps", () => {
    const mask = new CanvasMask(16, 16, 4);
    mask.paint([{ x: 4, y: 4 }], 1, 2);
    const before = mask.layers.map((l) => [...l]);
    mask.paint([{ x: 8, y: 8 }], 2, 3);
    expect(mask.undo()).toBe(true);
    expect(mask.layers.map((l) => [...l])).toEqual(before);
  });

  it("undo on a fresh mask returns false", () => {
    expect(new CanvasMask(8, 8, 3).undo()).toBe(false);
  });

  it("painting one class clears other classes underneath", () => {
    const mask = new CanvasMask(16, 16, 4);
    mask.paint([{ x: 8, y: 8 }], 1, 3);
    expect(mask.classAt(8, 8)).toBe(1);
    mask.paint([{ x: 8, y: 8 }], 2, 1);
    expect(mask.classAt(8, 8)).toBe(2);
    // exclusivity: no pixel carries two classes
    for (let i = 0; i < 16 * 16; i++) {
      const hot = mask.layers.filter((layer) => layer[i] === 1).length;
      expect(hot).toBeLessThanOrEqual(1);
    }
  });

  it("class 0 erases", () => {
    const mask = new CanvasMask(8, 8, 3);
    mask.paint([{ x: 2, y: 2 }], 1, 1);
    mask.paint([{ x: 2, y: 2 }], 0, 1);
    expect(mask.classAt(2, 2)).toBe(0);
  });

  it("zero-radius zero-length stroke sets a single pixel", () => {
    const mask = new CanvasMask(8, 8, 3);
    mask.paint([{ x: 3, y: 5 }], 2, 0);
    const pixels = mask.toIndexArray();
    expect(pixels[5 * 8 + 3]).toBe(2);
    expect(pixels.filter((v) => v !== 0).length).toBe(1);
  });

  it("clips out-of-bounds strokes instead of failing", () => {
    const mask = new CanvasMask(8, 8, 3);
    mask.paint(
      [
        { x: -5, y: -5 },
        { x: 12, y: 12 },
      ],
      1,
      2,
    );
    expect(mask.toIndexArray().some((v) => v === 1)).toBe(true);
  });

  it("bounds the undo stack", () => {
    const mask = new CanvasMask(4, 4, 3, 5);
    for (let i = 0; i < 12; i++) mask.paint([{ x: i % 4, y: 0 }], 1, 0);
    expect(mask.undoDepth).toBe(5);
  });

  it("rejects out-of-range classes", () => {
    const mask = new CanvasMask(4, 4, 3);
    expect(() => mask.paint([{ x: 0, y: 0 }], 3, 1)).toThrow(/out of range/);
  });
});

describe("CanvasMask export/import", () => {
  it("round-trips class layers losslessly", () => {
    const mask = new CanvasMask(16, 16, 4);
    mask.paint([{ x: 3, y: 3 }], 1, 2);
    mask.paint(
      [
        { x: 10, y: 4 },
        { x: 10, y: 12 },
      ],
      3,
      1.5,
    );
    const bytes = mask.exportPng();
    const { mask: back } = CanvasMask.importPng(bytes, 4);
    expect(back.layers.map((l) => [...l])).toEqual(mask.layers.map((l) => [...l]));
  });

  it("export of import is byte-identical", () => {
    const mask = new CanvasMask(16, 16, 4);
    mask.paint([{ x: 8, y: 8 }], 2, 4);
    const bytes = mask.exportPng();
    const { mask: back, image } = CanvasMask.importPng(bytes, 4);
    expect([...back.exportPng(image.palette)]).toEqual([...bytes]);
  });

  it("empty canvas exports an all-zero indexed PNG", () => {
    const mask = new CanvasMask(8, 8, 4);
    const decoded = decodeIndexedPng(mask.exportPng());
    expect(decoded.pixels.every((v) => v === 0)).toBe(true);
  });

  it("import rejects class indices beyond the model's classes", () => {
    const mask = new CanvasMask(8, 8, 6);
    mask.paint([{ x: 1, y: 1 }], 5, 1);
    const bytes = mask.exportPng();
    expect(() => CanvasMask.importPng(bytes, 3)).toThrow(/out of range/);
  });
});
