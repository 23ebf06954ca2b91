import type { OverlayJson } from "./types.js";

export type OverlaySide = "query" | "db";

const fmt = (value: number): string => value.toFixed(3);

/**
 * Render one side of an overlay as an SVG of transformed unit circles.
 *
 * The output is byte-identical to the service's own renderer: each region is
 * a unit circle under `matrix(a11 a21 a12 a22 cx cy)` with the row-major
 * shape [a11, a12, a21, a22] supplied by the service, and the pair's hotspot
 * intensity is applied as stroke opacity — the one piece of presentation
 * mapping the client is allowed to do.
 */
export function overlayToSvg(
  overlay: OverlayJson,
  side: OverlaySide = "query",
  width = 512,
  height = 512,
): string {
  if (side !== "query" && side !== "db") {
    throw new Error("side must be 'query' or 'db'");
  }
  const parts = [
    `<svg xmlns="http://www.w3.org/2000/svg" width="${width}" height="${height}" ` +
      `viewBox="0 0 ${width} ${height}">`,
  ];
  for (const pair of overlay.pairs) {
    const [a11, a12, a21, a22] = side === "query" ? pair.qshape : pair.dshape;
    const cx = side === "query" ? pair.qx : pair.dx;
    const cy = side === "query" ? pair.qy : pair.dy;
    const transform =
      `matrix(${fmt(a11)} ${fmt(a21)} ${fmt(a12)} ${fmt(a22)} ` +
      `${fmt(cx)} ${fmt(cy)})`;
    parts.push(
      `<circle r="1" transform="${transform}" fill="none" ` +
        `stroke="#ff3b30" stroke-opacity="${fmt(pair.intensity)}" stroke-width="0.15"/>`,
    );
  }
  parts.push("</svg>");
  return parts.join("\n");
}
