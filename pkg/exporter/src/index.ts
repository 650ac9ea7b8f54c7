export * from './mpt';
export * from './model';
export * from './dataset';
