/** Canvas display helpers.
 *
 * The displayed picture is always the PNG the service returned, drawn
 * with nearest-neighbor upscaling; the client does no pixel math of its
 * own, so what is on screen is byte-for-byte the latest response.
 */

/** Component-slider range: coefficients sweep -5..+5 in 0.5 steps,
 * neutral position 1 (the identity scaling). */
export const SLIDER = { min: -5, max: 5, step: 0.5, neutral: 1 } as const;

export function pngDataUrl(b64Png: string): string {
  return `data:image/png;base64,${b64Png}`;
}

/** Integer upscale factor fitting a W x H image into `target` pixels. */
export function displayScale(width: number, height: number, target = 320): number {
  return Math.max(1, Math.floor(target / Math.max(width, height)));
}

/** Map a canvas-local event position to image pixel coordinates. */
export function canvasToPixel(
  offsetX: number,
  offsetY: number,
  scale: number,
  width: number,
  height: number,
): { x: number; y: number } | null {
  const x = Math.floor(offsetX / scale);
  const y = Math.floor(offsetY / scale);
  if (x < 0 || x >= width || y < 0 || y >= height) return null;
  return { x, y };
}

/** Draw a base64 PNG into the canvas at an integer scale, unsmoothed. */
export function drawPng(
  canvas: HTMLCanvasElement,
  b64Png: string,
  scale: number,
): Promise<void> {
  return new Promise((resolve, reject) => {
    const img = new Image();
    img.onload = () => {
      canvas.width = img.width * scale;
      canvas.height = img.height * scale;
      const ctx = canvas.getContext("2d");
      if (!ctx) return reject(new Error("no 2d context"));
      ctx.imageSmoothingEnabled = false;
      ctx.drawImage(img, 0, 0, canvas.width, canvas.height);
      resolve();
    };
    img.onerror = () => reject(new Error("failed to decode image"));
    img.src = pngDataUrl(b64Png);
  });
}
