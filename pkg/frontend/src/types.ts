// Wire types for the norppa HTTP API. Field names use the service's
// kebab-case JSON keys verbatim; nothing here is recomputed client-side.

export type MatchStatus = "verified" | "unverified" | "geometry-failed";

export interface OverlayPair {
  qx: number;
  qy: number;
  /** Row-major 2x2 affine shape [a11, a12, a21, a22] of the query ellipse. */
  qshape: [number, number, number, number];
  dx: number;
  dy: number;
  dshape: [number, number, number, number];
  distance: number;
  /** Hotspot weight in [0.1, 1.0]; rendered as stroke opacity. */
  intensity: number;
}

export interface OverlayJson {
  "query-image-id": string;
  "db-image-id": string;
  pairs: OverlayPair[];
}

export interface VerifiedMatch {
  "individual-id": string;
  "image-id": string;
  distance: number;
  rank: number;
  status: MatchStatus;
  homography: number[][] | null;
  overlay: OverlayJson | null;
}

export interface QueryResult {
  "query-image-id": string;
  matches: VerifiedMatch[];
  "config-hash": string;
}

export interface IndividualsResponse {
  individuals: string[];
  count: number;
  "config-hash": string;
}

export interface ImagesResponse {
  "individual-id": string;
  images: string[];
  "config-hash": string;
}

export interface ConfirmRequest {
  "query-image-id": string;
  "individual-id"?: string;
  new?: boolean;
  "embedding-ref"?: string;
}

export interface ConfirmResponse {
  status: string;
  "individual-id": string;
  "config-hash": string;
}

export interface HealthResponse {
  status: string;
  entries: number;
  "config-hash": string;
}
